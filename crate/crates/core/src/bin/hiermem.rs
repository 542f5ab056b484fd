fn main() {
    std::process::exit(hiermem::cli::main_with_args(std::env::args_os()));
}
