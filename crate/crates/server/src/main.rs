fn main() -> std::process::ExitCode {
    labelforge::cli::main()
}
