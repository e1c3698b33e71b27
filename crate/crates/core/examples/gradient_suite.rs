//! Runs the finite-difference gradient suite for one module, or all of them.
//!
//! ```text
//! cargo run --release --example gradient_suite -- loss
//! ```

use dabfnet::verify::{run, Selection, VerifyOptions};

fn main() -> dabfnet::error::Result<()> {
    let selection: Selection = std::env::args().nth(1).unwrap_or_else(|| "bwfpn".into()).parse()?;
    let results = run(selection, &VerifyOptions::default(), |r| println!("{}", r.line()))?;
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", results.len(), failed);
    Ok(())
}
