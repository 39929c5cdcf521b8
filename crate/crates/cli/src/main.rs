fn main() {
    std::process::exit(davr_cli::run(std::env::args_os()));
}
