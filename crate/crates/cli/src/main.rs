fn main() {
    std::process::exit(granu_cli::cli::main_with_args(std::env::args_os()));
}
