fn main() {
    std::process::exit(ttsa_cli::run_cli(std::env::args_os()));
}
