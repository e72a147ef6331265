fn main() {
    std::process::exit(bcnn::cli::run());
}
