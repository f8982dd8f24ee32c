fn main() {
    std::process::exit(msn_cli::run(std::env::args_os()));
}
