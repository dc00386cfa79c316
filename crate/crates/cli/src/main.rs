fn main() {
    std::process::exit(emodial_cli::run(std::env::args_os()));
}
