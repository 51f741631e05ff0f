fn main() {
    std::process::exit(specrl::cli::run(std::env::args_os()));
}
