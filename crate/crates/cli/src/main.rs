use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(slamcert_cli::commands::run(std::env::args_os()))
}
