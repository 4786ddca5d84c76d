fn main() -> std::process::ExitCode {
    streamvq::cli::main()
}
