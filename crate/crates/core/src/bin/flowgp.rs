fn main() {
    std::process::exit(flowgp::cli::run(std::env::args_os()));
}
