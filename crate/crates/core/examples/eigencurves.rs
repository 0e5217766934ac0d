//! Eigenvalues of the two unconstrained soft solution maps as `delta`
//! varies, checked against their closed forms.

use softproj::cli::{eigencurves, EigencurveConfig};

fn main() -> softproj::error::Result<()> {
    let cfg = EigencurveConfig { points: 7, ..Default::default() };
    let rows = eigencurves(&cfg, 1)?;
    println!("{:>9} {:>7} {:>12} {:>12} {:>10}", "delta", "sigma", "squared", "quadratic", "deviation");
    for r in &rows {
        println!("{:>9.2e} {:>7} {:>12.6} {:>12.6} {:>10.1e}", r.delta, r.sigma, r.m8_eig, r.m9_eig, r.max_deviation());
    }
    Ok(())
}
