fn main() {
    std::process::exit(longctx::cli::main_with_args(std::env::args_os()));
}
