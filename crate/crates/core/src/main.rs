fn main() {
    std::process::exit(gesens::cli::run(std::env::args_os()));
}
