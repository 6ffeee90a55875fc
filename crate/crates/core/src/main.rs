fn main() {
    std::process::exit(megspike::cli::dispatch(std::env::args_os()));
}
