use std::process::ExitCode;

fn main() -> ExitCode {
    sentiformer::cli::run(std::env::args_os())
}
