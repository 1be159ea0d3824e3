fn main() {
    std::process::exit(msdc::cli::main_with_args(std::env::args_os()));
}
