fn main() {
    std::process::exit(paritylab::cli::main_with_args(std::env::args_os()));
}
