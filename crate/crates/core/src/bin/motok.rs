fn main() {
    std::process::exit(motok::cli::run(std::env::args_os()));
}
