use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(factorlab::harness::cli::main_with_args(std::env::args_os()))
}
