//! Runs the finite-difference suite over every differentiable operation
//! and a tiny end-to-end model.
//!
//! `cargo run --release --example gradient_check`

use bga_mner::selfcheck::run_gradient_suite;

fn main() -> bga_mner::Result<()> {
    let results = run_gradient_suite(0)?;
    for r in &results {
        println!(
            "{} {:<40} {:.2e} (tol {:.0e})",
            if r.passed() { "ok  " } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.tolerance
        );
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(())
}
