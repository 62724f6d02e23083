fn main() {
    std::process::exit(scriptorium::cli::main_with(std::env::args_os()));
}
