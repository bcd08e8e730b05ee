fn main() {
    env_logger::init();
    std::process::exit(conesep::cli::run(std::env::args_os()));
}
