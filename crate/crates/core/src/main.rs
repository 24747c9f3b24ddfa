fn main() {
    std::process::exit(memattr::cli::run(std::env::args_os()));
}
