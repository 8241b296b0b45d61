fn main() {
    std::process::exit(empathy_corpus::cli::main_with_args(std::env::args_os()));
}
