fn main() {
    std::process::exit(plotbench::cli::run(std::env::args_os()));
}
