//! Runs without the libtest harness so every criterion line reaches the terminal.

use std::process::ExitCode;

use chiralab::acceptance::{run_acceptance, TolScale};

fn main() -> ExitCode {
    // `cargo test -- --list` and friends expect the binary to stay quiet
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let scale = match TolScale::from_env() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let outcomes = match run_acceptance(None, &scale) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    for o in &outcomes {
        println!("{o}");
    }
    let failed: Vec<u8> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    if failed.is_empty() {
        println!("acceptance: {} of {} criteria passed", outcomes.len(), outcomes.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
