fn main() {
    std::process::exit(airbreath::cli::run(std::env::args_os()));
}
