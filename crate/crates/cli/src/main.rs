fn main() {
    std::process::exit(compass_lab::main_with_args(std::env::args_os()));
}
