fn main() {
    std::process::exit(refclass::cli::dispatch(std::env::args_os()));
}
