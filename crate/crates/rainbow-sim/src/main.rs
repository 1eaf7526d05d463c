use std::process::ExitCode;

fn main() -> ExitCode {
    rainbow_sim::cli::main()
}
