fn main() {
    std::process::exit(tokenmi::cli::main());
}
