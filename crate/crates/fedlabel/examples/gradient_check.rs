//! Checks every analytic gradient in the crate against central finite
//! differences on random small instances. This is the same oracle the test
//! suite runs; here it prints the worst relative error per operation.
//!
//! ```bash
//! cargo run --example gradient_check
//! ```

use fedlabel::oracles::{gradient_suite, GRAD_TOL};

fn main() {
    let outcomes = gradient_suite(0xFEDA, 50);
    println!("finite-difference gradient check (tolerance {GRAD_TOL:.0e})\n");
    for check in &outcomes {
        let verdict = if check.passed { "ok " } else { "FAIL" };
        println!("  {verdict}  {:<28} {}", check.name, check.detail);
    }
    let failures = outcomes.iter().filter(|c| !c.passed).count();
    if failures > 0 {
        eprintln!("\n{failures} gradient check(s) failed");
        std::process::exit(1);
    }
    println!("\nall {} operations match", outcomes.len());
}
