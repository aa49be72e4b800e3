fn main() {
    std::process::exit(mvfuse::cli::run_cli(std::env::args()));
}
