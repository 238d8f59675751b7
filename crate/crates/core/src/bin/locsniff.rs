fn main() {
    std::process::exit(locsniff::cli::run(std::env::args_os()));
}
