fn main() {
    std::process::exit(iondet::cli::run(std::env::args_os()));
}
