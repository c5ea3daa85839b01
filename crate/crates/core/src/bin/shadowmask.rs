fn main() {
    std::process::exit(shadowmask::cli::main_with_args(std::env::args_os()));
}
