fn main() {
    std::process::exit(datatk::cli::run(std::env::args_os()));
}
