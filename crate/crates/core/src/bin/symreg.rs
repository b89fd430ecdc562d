fn main() {
    std::process::exit(symreg::cli::run(std::env::args_os()));
}
