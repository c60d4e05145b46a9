use std::process::ExitCode;

use clap::Parser;
use tokenq::cli::{self, Cli};

fn main() -> ExitCode {
    let args = Cli::parse();
    match cli::run(args) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("tokenq: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
