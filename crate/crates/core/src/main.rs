fn main() {
    std::process::exit(riw::cli::main_with_args(std::env::args_os()));
}
