fn main() {
    std::process::exit(uvit::cli::run(std::env::args_os()));
}
