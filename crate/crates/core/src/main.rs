use std::process::ExitCode;

use phymass::{cli, Error};

fn main() -> ExitCode {
    match cli::run(std::env::args_os()) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(Error::Usage(msg)) => {
            eprint!("{msg}");
            ExitCode::from(2)
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
