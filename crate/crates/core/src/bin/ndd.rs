fn main() {
    std::process::exit(ndd::cli::run_cli(std::env::args_os()));
}
