fn main() {
    std::process::exit(hpdm::cli::main_with_args(std::env::args_os()));
}
