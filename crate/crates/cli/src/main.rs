fn main() {
    std::process::exit(spatcar_cli::run(std::env::args_os()));
}
