fn main() {
    std::process::exit(hyperadapt::cli::main_with_args(std::env::args_os()));
}
