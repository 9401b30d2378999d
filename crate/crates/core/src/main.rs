fn main() {
    std::process::exit(metakernel::harness::cli::run_cli(std::env::args_os()));
}
