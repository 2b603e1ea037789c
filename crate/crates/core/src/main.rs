use std::process::ExitCode;

use clap::Parser;

use attnpose::cli::{self, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let usage = err
                .downcast_ref::<attnpose::Error>()
                .is_some_and(attnpose::Error::is_usage);
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    cli::run(cli)?;
    Ok(())
}
