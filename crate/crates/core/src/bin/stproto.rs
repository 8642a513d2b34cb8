fn main() {
    std::process::exit(stproto_core::cli::run());
}
