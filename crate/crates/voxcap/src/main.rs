fn main() {
    std::process::exit(voxcap::cli::run());
}
