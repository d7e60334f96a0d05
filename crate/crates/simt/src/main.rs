fn main() {
    std::process::exit(simt::cli::run(std::env::args_os()));
}
