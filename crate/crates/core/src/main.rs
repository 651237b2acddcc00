fn main() {
    std::process::exit(headfit::cli::run(std::env::args_os()));
}
