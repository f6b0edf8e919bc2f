fn main() {
    std::process::exit(fedsim::cli::run_cli(std::env::args_os()));
}
