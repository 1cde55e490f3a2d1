fn main() -> std::process::ExitCode {
    mmtm::cli::main()
}
