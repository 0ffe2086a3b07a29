fn main() {
    std::process::exit(raf_cli::run(std::env::args_os()));
}
