fn main() {
    std::process::exit(gq_core::cli::run(std::env::args_os()));
}
