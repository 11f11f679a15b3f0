fn main() {
    std::process::exit(moreau_cli::run(std::env::args_os()));
}
