fn main() {
    std::process::exit(styletune::cli::run(std::env::args_os()));
}
