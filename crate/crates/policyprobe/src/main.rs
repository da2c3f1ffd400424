use std::process::ExitCode;

fn main() -> ExitCode {
    policyprobe::cli::main_with_args(std::env::args())
}
