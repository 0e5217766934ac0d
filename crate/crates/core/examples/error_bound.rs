//! Sweeps `delta` on a noisy case-study data matrix and compares the
//! distance to the exact weighted projector with its analytic bound.

use nalgebra::DMatrix;
use softproj::cli::{bound_instance, bound_sweep, interior_minimizer, log_grid, within_bound, ExperimentConfig};

fn main() -> softproj::error::Result<()> {
    let exp = ExperimentConfig::default();
    let decomp = bound_instance(&exp, &exp.bound, true, 11)?;
    let n = decomp.b.nrows();
    let sweep = bound_sweep(&decomp, &DMatrix::identity(n, n), &log_grid(1e-3, 1e3, 13))?;

    println!("{:>10} {:>12} {:>12} {:>12}", "delta", "gap", "bound", "holds");
    for (r, gap) in &sweep {
        println!("{:>10.3e} {:>12.4e} {:>12.4e} {:>12}", r.delta, gap, r.gamma, within_bound(r, *gap));
    }
    if let Some(k) = interior_minimizer(&sweep) {
        println!("bound is smallest at delta = {:.3e}", sweep[k].0.delta);
    }
    Ok(())
}
