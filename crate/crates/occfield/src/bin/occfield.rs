fn main() -> std::process::ExitCode {
    occfield::cli::main()
}
