fn main() {
    std::process::exit(conntrain::cli::run_cli(std::env::args()));
}
