fn main() {
    std::process::exit(stvae_cli::run(std::env::args_os()));
}
