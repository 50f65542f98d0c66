fn main() {
    std::process::exit(anchor_captioner::cli::run(std::env::args_os()));
}
