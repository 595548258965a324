fn main() {
    std::process::exit(kjoint::cli::main_with_args(std::env::args_os()));
}
