fn main() {
    std::process::exit(tvkit::cli::main_with_args(std::env::args_os()));
}
