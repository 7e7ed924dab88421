use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = ddg_lab::Cli::parse();
    match ddg_lab::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
