fn main() -> std::process::ExitCode {
    tcpde::cli::main_with(std::env::args_os())
}
