fn main() {
    std::process::exit(acrn::cli::run(std::env::args_os()));
}
