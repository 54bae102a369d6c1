use std::process::exit;

fn main() {
    exit(mor::cli::dispatch(std::env::args_os()));
}
