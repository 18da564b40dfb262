fn main() {
    std::process::exit(factormil::cli::run(std::env::args()));
}
