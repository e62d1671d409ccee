fn main() {
    std::process::exit(elpips_cli::run(std::env::args_os()));
}
