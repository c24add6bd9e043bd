//! `gatiaa gradcheck` — analytic gradients vs central finite differences.
//!
//! Runs the layer-by-layer and full-model check suite and prints one line
//! per unit. Exit code 1 if any unit's worst relative error crosses its
//! threshold. `--step` overrides the probe half-step: it exists so the
//! checker itself can be exercised — a grossly wrong step (say 0.5)
//! corrupts the numeric derivative and the run must fail.

use super::{CliError, RunConfig};
use gatiaa_core::gradcheck::{standard_suite, CheckOptions};
use std::time::Instant;

pub fn run(
    cfg: &RunConfig,
    step: Option<f64>,
    max_coords: Option<usize>,
) -> Result<u8, CliError> {
    let mut opts = CheckOptions::default();
    if let Some(h) = step {
        opts.step = h;
    }
    if let Some(m) = max_coords {
        opts.max_coords_per_tensor = m;
    }
    print!(
        "{}",
        cfg.echo(
            "gradcheck",
            &[
                ("step", opts.step.to_string()),
                ("max_coords", opts.max_coords_per_tensor.to_string()),
            ],
        )
    );

    let t0 = Instant::now();
    let reports = standard_suite(&opts)?;
    let mut failed = 0usize;
    for r in &reports {
        println!(
            "{:<28} max rel err {:.3e} over {} coords  {}",
            r.name,
            r.max_rel_err,
            r.coords_checked,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failed += 1;
        }
    }
    println!(
        "{} units checked, {} failed ({:.1}s)",
        reports.len(),
        failed,
        t0.elapsed().as_secs_f64()
    );
    Ok(if failed == 0 { 0 } else { 1 })
}
