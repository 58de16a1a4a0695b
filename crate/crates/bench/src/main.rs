fn main() {
    std::process::exit(topdown_bench::cli::run_cli(std::env::args_os()));
}
