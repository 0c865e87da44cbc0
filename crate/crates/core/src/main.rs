fn main() {
    std::process::exit(reid_core::cli::run_cli(std::env::args_os()));
}
