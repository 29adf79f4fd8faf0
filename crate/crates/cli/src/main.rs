use std::process::ExitCode;

fn main() -> ExitCode {
    ditlab_cli::run(std::env::args_os())
}
