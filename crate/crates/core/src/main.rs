fn main() {
    std::process::exit(lanecraft::cli::main());
}
