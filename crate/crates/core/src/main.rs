fn main() {
    std::process::exit(michell::cli::run(std::env::args_os()));
}
