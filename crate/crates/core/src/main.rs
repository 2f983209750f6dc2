fn main() {
    std::process::exit(featimit::cli::main_with_args(std::env::args_os()));
}
