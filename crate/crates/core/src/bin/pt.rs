fn main() {
    std::process::exit(ptools::cli::main_entry());
}
