fn main() {
    std::process::exit(stdan::cli::run(std::env::args_os()));
}
