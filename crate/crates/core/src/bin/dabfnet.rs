fn main() -> std::process::ExitCode {
    dabfnet::cli::main()
}
