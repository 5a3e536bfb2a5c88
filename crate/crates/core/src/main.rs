use std::process::ExitCode;

use memdisc::cli::{run_from, CliError};

fn main() -> ExitCode {
    let stdout = std::io::stdout();
    match run_from(std::env::args_os(), &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(text) => eprint!("{text}"),
                other => eprintln!("error: {other}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
