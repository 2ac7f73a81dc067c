fn main() {
    std::process::exit(wavenn::cli::run());
}
