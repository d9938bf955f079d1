fn main() {
    std::process::exit(guwen_cli::run(std::env::args_os()));
}
