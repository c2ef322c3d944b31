fn main() -> std::process::ExitCode {
    seqchat::cli::run(std::env::args_os())
}
