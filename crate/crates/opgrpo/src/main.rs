fn main() {
    std::process::exit(opgrpo::cli::main_entry());
}
