fn main() {
    std::process::exit(fkcontrol::cli::main_entry());
}
