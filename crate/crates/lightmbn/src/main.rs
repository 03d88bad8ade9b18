fn main() {
    std::process::exit(lightmbn::cli::run());
}
