//! Runs the finite-difference gradient checks and a check of a custom
//! composite function.
//!
//! cargo run --release --example gradient_check

use acrn::autodiff::grad_check;
use acrn::checks::{run_checks, DEFAULT_STEP, DEFAULT_TOL};
use acrn::tensor::Tensor;

fn main() -> acrn::Result<()> {
    for (name, report) in run_checks(None, 0, DEFAULT_STEP, DEFAULT_TOL)? {
        println!(
            "{name}: max rel err {:.2e} ({})",
            report.max_rel_error(),
            if report.passed() { "pass" } else { "FAIL" }
        );
    }

    // Any scalar function built from tape operations can be checked.
    let x = Tensor::from_fn(&[1, 2, 5, 5], |i| ((i * 7919) % 13) as f64 / 6.5 - 1.0);
    let k = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 104_729) % 11) as f64 / 5.5 - 1.0);
    let report = grad_check(
        |tape, v| {
            let y = tape.conv2d(v[0], v[1], 2, 1)?;
            let pooled = tape.global_avg_pool(y)?;
            Ok(tape.sum(pooled))
        },
        &[x, k],
        DEFAULT_STEP,
        DEFAULT_TOL,
    )?;
    println!("conv -> pool -> sum\n{report}");
    Ok(())
}
