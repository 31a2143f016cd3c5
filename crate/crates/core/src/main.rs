fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let Err(e) = swin_umamba::cli::run(&args) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
