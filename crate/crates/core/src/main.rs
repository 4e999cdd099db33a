fn main() {
    std::process::exit(riskstop::cli::main_entry());
}
