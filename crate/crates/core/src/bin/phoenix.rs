fn main() {
    phoenix::cli::init_threads();
    std::process::exit(phoenix::cli::run_from(std::env::args_os()));
}
