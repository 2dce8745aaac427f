fn main() {
    std::process::exit(lupi_cli::main_with_args(std::env::args_os()));
}
