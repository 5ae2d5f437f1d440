fn main() {
    std::process::exit(cmflow::cli::main_with(std::env::args_os()));
}
