fn main() -> std::process::ExitCode {
    ude_cli::main_with_args(std::env::args_os())
}
