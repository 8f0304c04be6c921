fn main() {
    std::process::exit(lipreg::cli::run(std::env::args_os()));
}
