fn main() {
    std::process::exit(uncha::cli::run(std::env::args_os()));
}
