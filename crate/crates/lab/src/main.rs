fn main() {
    std::process::exit(eos_lab::cli::main_with(std::env::args_os()));
}
