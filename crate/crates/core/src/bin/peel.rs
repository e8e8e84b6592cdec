fn main() {
    std::process::exit(peel_core::harness::cli::run_cli(std::env::args_os()));
}
