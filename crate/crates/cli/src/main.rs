use std::process::ExitCode;

fn main() -> ExitCode {
    captime_cli::run()
}
