//! Deterministic mock application driven by a behavior file.

use std::path::PathBuf;

use clap::Parser;
use copilot_core::tracepoint::Emitter;
use copilot_core::workloads::{run_mock, MockBehavior, BEHAVIOR_ERROR_EXIT};

#[derive(Parser)]
#[command(name = "copilot-mock", about = "Mock workflow application")]
struct Args {
    /// Behavior file (TOML).
    #[arg(long)]
    behavior: PathBuf,
}

fn main() {
    let args = Args::parse();
    let behavior = match MockBehavior::load(&args.behavior) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("copilot-mock: {e}");
            std::process::exit(BEHAVIOR_ERROR_EXIT);
        }
    };
    let code = run_mock(&behavior, Emitter::from_env());
    std::process::exit(code);
}
