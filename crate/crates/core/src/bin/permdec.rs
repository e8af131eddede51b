fn main() {
    std::process::exit(permdec::cli::run(std::env::args_os()));
}
