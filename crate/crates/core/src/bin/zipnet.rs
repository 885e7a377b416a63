fn main() {
    std::process::exit(zipnet::cli::run(std::env::args_os()));
}
