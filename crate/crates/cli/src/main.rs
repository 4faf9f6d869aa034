use clap::Parser;
use htxc_cli::{execute, Cli};

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = execute(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
