fn main() {
    std::process::exit(near_ortho::cli::run(std::env::args_os()));
}
