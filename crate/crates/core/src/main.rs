use std::process::ExitCode;

use survival_lab::cli::{run, CliError};

fn main() -> ExitCode {
    let stdout = std::io::stdout();
    match run(std::env::args_os(), &mut stdout.lock()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(CliError::Usage(text)) => {
            eprint!("{text}");
            ExitCode::from(2)
        }
        // downstream closed the pipe (`| head`): not our failure
        Err(CliError::Io { source, .. }) if source.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
