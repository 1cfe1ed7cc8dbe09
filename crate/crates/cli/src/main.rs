fn main() {
    std::process::exit(actta_cli::run(std::env::args_os()));
}
