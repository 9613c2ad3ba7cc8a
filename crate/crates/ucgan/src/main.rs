fn main() {
    std::process::exit(ucgan::cli::run());
}
