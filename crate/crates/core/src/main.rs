fn main() {
    std::process::exit(actdiff::cli::dispatch(std::env::args_os()));
}
