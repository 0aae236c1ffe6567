fn main() {
    if let Err(e) = tta::cli::dispatch(std::env::args_os()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
