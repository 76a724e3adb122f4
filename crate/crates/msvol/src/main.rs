fn main() {
    std::process::exit(msvol::cli::run());
}
