fn main() {
    std::process::exit(sslab::cli::run(std::env::args_os()));
}
