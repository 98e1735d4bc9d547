fn main() {
    std::process::exit(epiplace::cli::dispatch(std::env::args_os()));
}
