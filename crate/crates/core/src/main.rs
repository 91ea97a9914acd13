fn main() {
    std::process::exit(nap_core::cli::run(std::env::args_os()));
}
