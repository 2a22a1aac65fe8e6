fn main() {
    std::process::exit(multitune::cli::run(std::env::args_os()));
}
