fn main() -> std::process::ExitCode {
    landmark_match::cli::run()
}
