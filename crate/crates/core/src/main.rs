fn main() {
    std::process::exit(mixerforge::cli::main_with_args(std::env::args_os()));
}
