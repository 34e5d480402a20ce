use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use moqae_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(out.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("moqae: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
