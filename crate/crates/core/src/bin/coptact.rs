fn main() {
    std::process::exit(coptact::cli::run(std::env::args_os()));
}
