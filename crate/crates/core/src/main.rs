fn main() {
    std::process::exit(depthfuse::cli::main_with_args(std::env::args_os()));
}
