fn main() {
    std::process::exit(docsynth_cli::main_with_args(std::env::args_os()));
}
