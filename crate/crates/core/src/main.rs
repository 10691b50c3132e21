fn main() {
    std::process::exit(semaug::cli::main_with_args(std::env::args_os()));
}
