fn main() {
    std::process::exit(unetlab::cli::main_with_args(std::env::args_os()));
}
