fn main() {
    std::process::exit(rfopt::cli::run(std::env::args_os()));
}
