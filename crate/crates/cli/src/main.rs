fn main() {
    std::process::exit(uqt_cli::run(std::env::args_os()));
}
