fn main() {
    std::process::exit(insincere::cli::run_cli(std::env::args_os()));
}
