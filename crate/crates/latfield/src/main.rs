use clap::Parser;

use latfield::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            if let Some(msg) = &outcome.message {
                eprintln!("latfield: {msg}");
            }
            println!("{}", outcome.out_dir.display());
            std::process::exit(outcome.exit_code);
        }
        Err(e) => {
            eprintln!("latfield: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
