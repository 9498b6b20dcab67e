fn main() {
    std::process::exit(interformer_cli::run(std::env::args_os()));
}
