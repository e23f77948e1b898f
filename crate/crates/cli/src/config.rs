//! Flat `key = value` configuration files.
//!
//! Keys are the long flag names of the command (`n-top`, or `n_top`).
//! Lines starting with `#` are comments. Each entry becomes command-line
//! tokens placed before the real arguments.

use std::path::Path;

use clap::{ArgAction, Command};

use crate::{CliError, CliResult};

/// Parses `text` into flag tokens for `command`, rejecting unknown keys.
pub fn tokens(text: &str, command: &Command) -> CliResult<Vec<String>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", lineno + 1)))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        let arg = command
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| CliError::Usage(format!("config line {}: unknown key {key:?}", lineno + 1)))?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            let on: bool =
                value.parse().map_err(|_| CliError::Usage(format!("config line {}: {key} expects true or false", lineno + 1)))?;
            if on {
                out.push(format!("--{key}"));
            }
        } else {
            out.push(format!("--{key}"));
            out.push(value.to_string());
        }
    }
    Ok(out)
}

pub fn load(path: &Path, command: &Command) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    tokens(&text, command)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Cli;
    use clap::CommandFactory;

    fn simulate() -> Command {
        Cli::command().find_subcommand("simulate").unwrap().clone()
    }

    #[test]
    fn keys_become_flags() {
        let t = tokens("# study\nscheme = 12,3,1\nn_top=50\nallow-large = true\nseed = 3\n", &simulate()).unwrap();
        assert_eq!(t, ["--scheme", "12,3,1", "--n-top", "50", "--allow-large", "--seed", "3"]);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = tokens("colour = blue\n", &simulate()).unwrap_err();
        assert!(err.to_string().contains("unknown key"));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn malformed_line_rejected() {
        assert!(tokens("scheme 4,1\n", &simulate()).is_err());
        assert!(tokens("allow_large = maybe\n", &simulate()).is_err());
    }
}
