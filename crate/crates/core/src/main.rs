fn main() {
    std::process::exit(mer_core::cli::run(std::env::args_os()));
}
