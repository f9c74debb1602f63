fn main() {
    std::process::exit(pcd::cli::run(std::env::args().collect()));
}
