fn main() {
    std::process::exit(tlq_cli::run(std::env::args_os()));
}
