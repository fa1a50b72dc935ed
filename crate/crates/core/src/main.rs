fn main() {
    std::process::exit(ageformer::cli::main_with_args(std::env::args_os()));
}
