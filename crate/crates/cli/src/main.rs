fn main() {
    std::process::exit(pda_cli::run(std::env::args_os()));
}
