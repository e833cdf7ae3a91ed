use std::io::{self, Write};

fn main() {
    let mut out = io::stdout();
    let result = dcls_core::cli::run(std::env::args_os(), &mut out);
    let _ = out.flush();
    if let Err(e) = result {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
