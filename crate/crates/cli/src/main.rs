fn main() {
    std::process::exit(mixsa_cli::run(std::env::args_os()));
}
