use std::process::ExitCode;

fn main() -> ExitCode {
    wnq::cli::run(std::env::args_os())
}
