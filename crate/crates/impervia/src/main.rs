fn main() {
    std::process::exit(impervia::cli::run(std::env::args_os()));
}
