fn main() {
    std::process::exit(nestor::cli::run(std::env::args_os()));
}
