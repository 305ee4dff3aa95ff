//! Runs the numerical self-checks: round trips in both precisions,
//! log-determinant against a dense Jacobian, and gradient checks.

use voxflow::verify::{run_suite, VerifyOptions};

fn main() -> voxflow::Result<()> {
    let checks = run_suite(&VerifyOptions::default())?;
    for c in &checks {
        let tag = if c.passed { "ok" } else { "FAILED" };
        println!("{tag:<6} {:<36} {:.2e} (< {:.0e})", c.name, c.value, c.tolerance);
    }
    Ok(())
}
