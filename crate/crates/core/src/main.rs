fn main() {
    std::process::exit(cardioseg::cli::run(std::env::args_os()));
}
