fn main() {
    std::process::exit(lrkit::cli::main_stdio());
}
