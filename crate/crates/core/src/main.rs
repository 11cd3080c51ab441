fn main() {
    std::process::exit(srrm::cli::run(std::env::args_os()));
}
