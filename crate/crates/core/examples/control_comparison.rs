//! One noisy data set, four planners: the exact behavior, regularised
//! DeePC and the two soft-projection formulations.

use softproj::cli::{draw_realization, evaluate, stream_id, CampaignContext, ExperimentConfig, Phase};
use softproj::control::{Controller, ControllerModel, Method, MethodConfig};

fn main() -> softproj::error::Result<()> {
    let exp = ExperimentConfig::default();
    let ctx = CampaignContext::new(&exp)?;
    let real = draw_realization(&exp, &ctx, Some(10.0), stream_id(Phase::Test, 0, 0))?;

    let plans = [
        (Method::TrueProjection, f64::NAN),
        (Method::DeepcL2, 1e3),
        (Method::SoftSquared, 1.0),
        (Method::SoftQuadratic, 1.0),
    ];
    println!("{:<16} {:>10} {:>10} {:>8}", "method", "cost", "pred err", "iters");
    for (method, param) in plans {
        let mut cfg = MethodConfig::new(method);
        cfg.lambda_g = param;
        cfg.delta = param;
        cfg.alpha = exp.alpha;
        cfg.alpha_hat = exp.alpha_hat;
        let ctrl = match method {
            Method::TrueProjection => Controller::new(
                ctx.layout,
                ctx.weights.clone(),
                cfg,
                ControllerModel::Behavior(ctx.behavior.clone()),
                ctx.bounds.clone(),
            )?,
            _ => Controller::from_data(ctx.layout, ctx.weights.clone(), cfg, &real.data, ctx.bounds.clone())?,
        };
        let sol = ctrl.solve(&real.target)?;
        let out = evaluate(&ctx, &sol)?;
        println!("{:<16} {:>10.4} {:>10.4} {:>8}", method.name(), out.cost, out.pred_err, sol.iterations);
    }
    Ok(())
}
