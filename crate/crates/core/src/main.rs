use std::process::ExitCode;

use clap::Parser;
use fec::cli::{exit, run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    if let Ok(n) = std::env::var("FEC_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: FEC_THREADS must be a positive integer, got `{n}`");
                return ExitCode::from(exit::USAGE);
            }
        }
    }
    ExitCode::from(run(cli))
}
