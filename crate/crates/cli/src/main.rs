fn main() {
    std::process::exit(condiff_cli::run(std::env::args_os()));
}
