fn main() {
    std::process::exit(hfupdate_cli::run(std::env::args_os()));
}
