use std::process::ExitCode;

use clap::Parser;
use vpl_cli::{exit_code, run, Cli};
use vpl_core::numcore::exec::{threads_from_env, with_threads};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = with_threads(threads_from_env(), || run(cli, &mut std::io::stdout().lock()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
