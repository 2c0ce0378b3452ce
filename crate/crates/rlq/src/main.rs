fn main() {
    std::process::exit(rlq::cli::dispatch(std::env::args_os()));
}
