fn main() {
    std::process::exit(graphdepth::cli::dispatch(std::env::args_os()));
}
