fn main() {
    std::process::exit(robosplat::cli::main_with_args(std::env::args_os()));
}
