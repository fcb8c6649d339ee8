fn main() {
    std::process::exit(tate::cli::run_cli(std::env::args_os()));
}
