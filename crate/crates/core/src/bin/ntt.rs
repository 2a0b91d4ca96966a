fn main() {
    std::process::exit(ntt_core::cli::run_cli(std::env::args_os()));
}
