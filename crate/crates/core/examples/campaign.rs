//! A reduced Monte-Carlo campaign: pick `lambda_g` and `delta` on
//! validation realizations, then score both methods on fresh ones.

use softproj::cli::{log_grid, test_campaign, validation_campaign, ExperimentConfig};

fn main() -> softproj::error::Result<()> {
    let mut exp = ExperimentConfig::default();
    exp.n_validation = 20;
    exp.n_test = 20;
    exp.lambda_g_grid = log_grid(10.0, 1e7, 7);
    exp.delta_grid = log_grid(1e-3, 1e3, 7);

    let val = validation_campaign(&exp)?;
    let stats = test_campaign(&exp, &val.chosen)?;
    println!("{:>4} {:<14} {:>10} {:>9} {:>9} {:>9}", "snr", "method", "param", "cost", "pred err", "variance");
    for s in &stats {
        println!(
            "{:>4} {:<14} {:>10.3e} {:>9.4} {:>9.4} {:>9.4}",
            s.snr,
            s.method.name(),
            s.param,
            s.mean_cost,
            s.mean_pred_err,
            s.pred_err_var
        );
    }
    Ok(())
}
