fn main() -> std::process::ExitCode {
    genlearn_core::cli::main()
}
