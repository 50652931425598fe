fn main() {
    std::process::exit(tps::io::cli::main_with(std::env::args_os()));
}
