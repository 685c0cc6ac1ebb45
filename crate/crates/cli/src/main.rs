fn main() {
    std::process::exit(lanekeep_cli::run(std::env::args_os()));
}
