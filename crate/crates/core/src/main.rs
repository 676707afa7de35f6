fn main() {
    std::process::exit(mfals::cli::main_with_args(std::env::args_os()));
}
