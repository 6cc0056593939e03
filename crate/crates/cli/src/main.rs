fn main() {
    std::process::exit(heunflow_cli::run(std::env::args_os()));
}
