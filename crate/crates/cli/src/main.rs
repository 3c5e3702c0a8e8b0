use std::process::ExitCode;

use clap::Parser;
use tjac::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(m) => {
            log::info!("{} finished in {:.1} s; manifest in {}", m.command, m.wall_clock_secs, cli.out.join(&m.command).display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
