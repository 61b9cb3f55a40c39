fn main() {
    std::process::exit(odiwi::cli::run(std::env::args_os()));
}
