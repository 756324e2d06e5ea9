fn main() {
    std::process::exit(sepp_cli::run(std::env::args_os()));
}
