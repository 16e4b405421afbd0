fn main() {
    std::process::exit(sensemask::cli::run(std::env::args_os()));
}
