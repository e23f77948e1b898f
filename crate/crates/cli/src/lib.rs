//! Command-line front end: simulation study, forecast updating on CSV data
//! and scoring of stored predictions.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand};

pub mod config;
pub mod evaluate;
pub mod simulate;
pub mod table;
pub mod update;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<hfupdate::Error> for CliError {
    fn from(e: hfupdate::Error) -> Self {
        use hfupdate::Error as E;
        if e.is_numerical() {
            return CliError::Numerical(e.to_string());
        }
        match e.root() {
            E::InvalidScheme(_) | E::InvalidParameter(_) | E::OutOfRange { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(format!("csv: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "hfupdate", version, about = "Forecast updating for temporal hierarchies", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the Monte Carlo study and write results.csv and meta.json.
    Simulate(simulate::SimulateArgs),
    /// Update next-period forecasts of series in a long CSV table.
    Update(update::UpdateArgs),
    /// Score stored predictions against actuals by relative RMSE.
    Evaluate(evaluate::EvaluateArgs),
}

/// Options shared by every command.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Flat `key = value` file; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl CommonArgs {
    pub fn out_dir(&self) -> CliResult<PathBuf> {
        let out = self.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))?;
        std::fs::create_dir_all(&out)?;
        Ok(out)
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Update(_) => "update",
            Command::Evaluate(_) => "evaluate",
        }
    }

    fn common(&self) -> &CommonArgs {
        match self {
            Command::Simulate(a) => &a.common,
            Command::Update(a) => &a.common,
            Command::Evaluate(a) => &a.common,
        }
    }
}

/// Decimal text that parses back to the same `f64` (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

enum Failure {
    Clap(clap::Error),
    Cli(CliError),
}

impl From<clap::Error> for Failure {
    fn from(e: clap::Error) -> Self {
        Failure::Clap(e)
    }
}

impl From<CliError> for Failure {
    fn from(e: CliError) -> Self {
        Failure::Cli(e)
    }
}

fn parse(argv: &[OsString]) -> Result<Cli, Failure> {
    let cli = Cli::try_parse_from(argv)?;
    let Some(path) = cli.command.common().config.clone() else {
        return Ok(cli);
    };
    let name = cli.command.name();
    let sub = Cli::command().find_subcommand(name).cloned().expect("parsed subcommand exists");
    let tokens = config::load(&path, &sub)?;
    // Config values first so that later command-line flags override them.
    let pos = argv.iter().position(|a| a.to_str() == Some(name)).expect("subcommand present in argv");
    let mut merged: Vec<OsString> = argv[..=pos].to_vec();
    merged.extend(tokens.into_iter().map(OsString::from));
    merged.extend_from_slice(&argv[pos + 1..]);
    Ok(Cli::try_parse_from(merged)?)
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let result = parse(&argv).and_then(|cli| {
        match cli.command {
            Command::Simulate(a) => simulate::run(&a),
            Command::Update(a) => update::run(&a),
            Command::Evaluate(a) => evaluate::run(&a),
        }
        .map_err(Failure::Cli)
    });
    match result {
        Ok(()) => 0,
        Err(Failure::Clap(e)) => {
            let _ = e.print();
            if e.use_stderr() {
                1
            } else {
                0
            }
        }
        Err(Failure::Cli(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
