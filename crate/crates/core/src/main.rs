fn main() {
    std::process::exit(schoolcount::cli::dispatch(std::env::args_os()));
}
