fn main() {
    std::process::exit(nepqa_cli::run(std::env::args_os()));
}
