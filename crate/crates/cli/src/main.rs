use std::process::ExitCode;

fn main() -> ExitCode {
    e2p_cli::main_with_args(std::env::args_os())
}
