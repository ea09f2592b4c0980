use std::process::ExitCode;

fn main() -> ExitCode {
    dal::cli::main_with(std::env::args_os())
}
