fn main() {
    std::process::exit(ram3d::cli::main_with_args(std::env::args_os()));
}
