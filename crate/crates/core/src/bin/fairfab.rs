fn main() {
    std::process::exit(fair_fabric::cli::run(std::env::args_os()));
}
