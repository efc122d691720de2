fn main() {
    std::process::exit(shellflow::cli::run(std::env::args_os()));
}
