fn main() {
    std::process::exit(rnes::cli::run(std::env::args_os()));
}
