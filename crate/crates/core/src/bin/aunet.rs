fn main() {
    std::process::exit(aunet::cli::run(std::env::args()));
}
