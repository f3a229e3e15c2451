fn main() {
    std::process::exit(mlca::cli::run(std::env::args_os()));
}
