fn main() {
    std::process::exit(reachsafe::cli::run(std::env::args_os()));
}
