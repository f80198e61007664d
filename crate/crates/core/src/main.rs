fn main() {
    std::process::exit(dosepet::cli::main_with_args(std::env::args_os()));
}
