fn main() {
    std::process::exit(dcpr::cli::main());
}
