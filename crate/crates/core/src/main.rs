fn main() {
    std::process::exit(qfconv::cli::run(std::env::args_os()));
}
