fn main() {
    std::process::exit(sparse_nlme::cli::run_from_args(std::env::args_os()));
}
