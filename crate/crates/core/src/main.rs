fn main() {
    std::process::exit(tsod_core::cli::run(std::env::args_os()));
}
