fn main() {
    std::process::exit(rfolive_cli::main_with(std::env::args_os()));
}
