fn main() -> std::process::ExitCode {
    ghostvlad::cli::main()
}
