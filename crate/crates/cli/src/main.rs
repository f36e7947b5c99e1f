fn main() {
    std::process::exit(rebirth_cli::run(std::env::args_os()));
}
