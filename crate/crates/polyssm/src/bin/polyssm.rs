fn main() {
    std::process::exit(polyssm::cli::run(std::env::args_os()));
}
