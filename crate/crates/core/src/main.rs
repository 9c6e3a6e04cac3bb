fn main() {
    std::process::exit(besa::harness::cli::run(std::env::args_os()));
}
