fn main() {
    std::process::exit(neural_kopt::cli::run(std::env::args_os()));
}
