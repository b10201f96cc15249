fn main() {
    std::process::exit(forgesem::cli::run(std::env::args_os()));
}
