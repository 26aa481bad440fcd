fn main() {
    std::process::exit(procdiff::cli::main_with_args(std::env::args()));
}
