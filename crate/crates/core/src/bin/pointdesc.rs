fn main() {
    std::process::exit(pointdesc::cli::run(std::env::args_os()));
}
