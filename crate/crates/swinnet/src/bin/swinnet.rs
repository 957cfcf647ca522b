fn main() {
    std::process::exit(swinnet::cli::run(std::env::args_os()));
}
