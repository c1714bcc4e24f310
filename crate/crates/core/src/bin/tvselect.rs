fn main() {
    std::process::exit(tvselect::cli::run(std::env::args_os()));
}
