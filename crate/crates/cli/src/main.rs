use std::process::ExitCode;

use clap::Parser;
use polimatch_cli::{run, Cli};
use tracing_subscriber::filter::LevelFilter;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = cli.global.log_level.parse::<LevelFilter>().unwrap_or(LevelFilter::INFO);
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();

    match run(cli) {
        Ok(Some(summary)) => {
            let counts: Vec<String> = summary.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!("{}: ok ({})", summary.stage, counts.join(", "));
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
