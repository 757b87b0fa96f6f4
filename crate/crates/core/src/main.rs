fn main() {
    std::process::exit(physio_mae::cli::dispatch(std::env::args_os()));
}
