fn main() {
    std::process::exit(bml::cli::run(std::env::args_os()));
}
