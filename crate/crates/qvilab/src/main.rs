fn main() {
    std::process::exit(qvilab::cli::run());
}
