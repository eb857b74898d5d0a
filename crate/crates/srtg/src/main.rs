fn main() {
    std::process::exit(srtg::cli::run(std::env::args_os()));
}
