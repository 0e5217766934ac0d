//! Monte-Carlo validation and test campaigns over noise realizations.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::behavior::{behavior_basis, build_data_matrix, DataMatrix, Subspace};
use crate::control::{
    ControlSolution, ControlTarget, ControlWeights, Controller, ControllerModel, DeepcData, Layout, Method,
    MethodConfig,
};
use crate::error::{Error, Result};
use crate::plant::{collect_excitation_data, gaussian_vector, NoiseConfig, PlantModel};
use crate::qp::{QpSettings, TrajectoryBox};
use crate::soft_projection::soft_projector;

/// Which seed range a realization draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Validation,
    Test,
}

impl Phase {
    fn stream_tag(self) -> u64 {
        match self {
            Phase::Validation => 1,
            Phase::Test => 2,
        }
    }
}

/// Stream id of realization `r` at SNR index `snr_idx`; phases never share one.
pub fn stream_id(phase: Phase, snr_idx: usize, r: usize) -> u64 {
    (phase.stream_tag() << 48) | ((snr_idx as u64) << 32) | r as u64
}

/// Everything shared by the realizations of a campaign.
#[derive(Clone, Debug)]
pub struct CampaignContext {
    pub model: PlantModel,
    pub layout: Layout,
    pub weights: ControlWeights,
    pub bounds: Option<TrajectoryBox>,
    pub u_ref: DVector<f64>,
    pub y_ref: DVector<f64>,
    /// Exact behavior in control order, for the oracle method.
    pub behavior: Subspace,
    pub settings: QpSettings,
}

impl CampaignContext {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.model()?;
        let layout = cfg.layout()?;
        let l = layout.t_ini + layout.t_f;
        let behavior = behavior_basis(&model.a, &model.b, &model.c, l)?.permute_rows(&layout.perm());
        Ok(Self {
            weights: cfg.weights(&layout)?,
            bounds: cfg.bounds(&layout)?,
            u_ref: cfg.u_ref_vec(model.m()),
            y_ref: cfg.y_ref_vec(),
            model,
            layout,
            behavior,
            settings: QpSettings::default(),
        })
    }

    /// Future reference block `[u_ref..; y_ref..]`.
    pub fn w_ref(&self) -> DVector<f64> {
        self.layout.constant_reference(&self.u_ref, &self.y_ref)
    }
}

/// One noisy data set plus the measured initial window.
#[derive(Clone, Debug)]
pub struct Realization {
    pub data: DataMatrix,
    pub target: ControlTarget,
    pub measurement_std: Vec<f64>,
}

/// Draws realization `r`: excitation data from the zero state with
/// SNR-calibrated measurement noise, and an initial window of the plant at
/// rest seen through the same noise.
pub fn draw_realization(
    cfg: &ExperimentConfig,
    ctx: &CampaignContext,
    snr: Option<f64>,
    stream: u64,
) -> Result<Realization> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let p = ctx.model.p();
    let noise = match snr {
        Some(s) => NoiseConfig {
            process_std: cfg.process_std.clone(),
            measurement_std: vec![0.0; p],
            snr_target: Some(s),
            seed: cfg.seed,
        },
        None => NoiseConfig::noiseless(&ctx.model),
    };
    let collected = collect_excitation_data(&ctx.model, cfg.data_length, cfg.input_std, &noise, &mut rng)?;
    let layout = &ctx.layout;
    let data = build_data_matrix(&collected.u, &collected.y, layout.sig.l, layout.t_ini, layout.t_f)?;
    let u_ini = vec![DVector::zeros(ctx.model.m()); layout.t_ini];
    let y_ini: Vec<_> = (0..layout.t_ini)
        .map(|_| {
            let noise = gaussian_vector(&mut rng, &collected.measurement_std);
            if cfg.noisy_initial_window {
                noise
            } else {
                DVector::zeros(noise.len())
            }
        })
        .collect();
    let target = ControlTarget::new(layout, layout.stack_ini(&u_ini, &y_ini)?, ctx.w_ref())?;
    Ok(Realization { data, target, measurement_std: collected.measurement_std })
}

/// Open-loop quality of a plan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    /// `||w_f - w_f_true||` with `w_f_true` the noise-free response to the
    /// planned inputs from the true (zero) initial state.
    pub pred_err: f64,
    /// Tracking cost of that response.
    pub cost: f64,
}

pub fn evaluate(ctx: &CampaignContext, sol: &ControlSolution) -> Result<Outcome> {
    let layout = &ctx.layout;
    let us = layout.future_inputs(&sol.w_star);
    let ys_hat = layout.future_outputs(&sol.w_star);
    let ys = ctx.model.simulate(&DVector::zeros(ctx.model.n()), &us)?;
    let pred_err = ys_hat.iter().zip(&ys).map(|(a, b)| (a - b).norm_squared()).sum::<f64>().sqrt();
    let u_ref = vec![ctx.u_ref.clone(); layout.t_f];
    let y_ref = vec![ctx.y_ref.clone(); layout.t_f];
    let cost = ctx.weights.tracking_cost(&us, &ys, &u_ref, &y_ref);
    if !(pred_err.is_finite() && cost.is_finite()) {
        return Err(Error::NumericalIntegrity("non-finite open-loop outcome".into()));
    }
    Ok(Outcome { pred_err, cost })
}

/// A method at one parameter value; `param` is `lambda_g` or `delta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub method: Method,
    pub param: f64,
}

impl GridPoint {
    pub fn config(&self, cfg: &ExperimentConfig) -> MethodConfig {
        let mut mc = MethodConfig::new(self.method);
        mc.alpha = cfg.alpha;
        mc.alpha_hat = cfg.alpha_hat;
        match self.method {
            Method::DeepcL2 | Method::DeepcProjected => mc.lambda_g = self.param,
            Method::SoftSquared | Method::SoftQuadratic => mc.delta = self.param,
            Method::TrueProjection => {}
        }
        mc
    }
}

/// Solves every grid point on one realization. Solver failures become
/// `None`; any other error aborts.
pub fn solve_points(
    cfg: &ExperimentConfig,
    ctx: &CampaignContext,
    real: &Realization,
    points: &[GridPoint],
) -> Result<Vec<Option<Outcome>>> {
    let mut deepc: Option<DeepcData> = None;
    let identity = DMatrix::identity(ctx.layout.len(), ctx.layout.len());
    let mut hp: Option<DMatrix<f64>> = None;
    points
        .iter()
        .map(|pt| {
            let mc = pt.config(cfg);
            let model = match pt.method {
                Method::TrueProjection => ControllerModel::Behavior(ctx.behavior.clone()),
                Method::DeepcL2 | Method::DeepcProjected => {
                    if deepc.is_none() {
                        deepc = Some(DeepcData::new(&real.data)?);
                    }
                    ControllerModel::Deepc(deepc.clone().expect("just built"))
                }
                Method::SoftSquared | Method::SoftQuadratic => {
                    let h = hp.get_or_insert_with(|| real.data.permuted());
                    ControllerModel::Soft(soft_projector(h, &identity, pt.param)?)
                }
            };
            let controller = Controller::new(ctx.layout, ctx.weights.clone(), mc, model, ctx.bounds.clone())?
                .with_settings(ctx.settings);
            match controller.solve(&real.target) {
                Ok(sol) => evaluate(ctx, &sol).map(Some),
                Err(Error::Solver { .. } | Error::Conditioning(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Aggregate over realizations at one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointStats {
    pub snr: f64,
    pub method: Method,
    pub param: f64,
    pub runs: usize,
    pub failures: usize,
    pub mean_cost: f64,
    pub mean_pred_err: f64,
    pub pred_err_var: f64,
}

impl PointStats {
    fn from_outcomes(snr: f64, point: GridPoint, outcomes: &[Option<Outcome>]) -> Self {
        let ok: Vec<Outcome> = outcomes.iter().flatten().copied().collect();
        let n = ok.len() as f64;
        let mean = |f: fn(&Outcome) -> f64| if ok.is_empty() { f64::NAN } else { ok.iter().map(f).sum::<f64>() / n };
        let mean_cost = mean(|o| o.cost);
        let mean_pred_err = mean(|o| o.pred_err);
        // unbiased sample variance
        let pred_err_var = if ok.len() < 2 {
            f64::NAN
        } else {
            ok.iter().map(|o| (o.pred_err - mean_pred_err).powi(2)).sum::<f64>() / (n - 1.0)
        };
        Self {
            snr,
            method: point.method,
            param: point.param,
            runs: outcomes.len(),
            failures: outcomes.len() - ok.len(),
            mean_cost,
            mean_pred_err,
            pred_err_var,
        }
    }
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

pub const VALIDATION_HEADER: [&str; 6] = ["snr", "method", "param", "mean_pred_err", "mean_cost", "failures"];
pub const TEST_HEADER: [&str; 7] =
    ["snr", "method", "param", "mean_cost", "mean_pred_err", "pred_err_var", "failures"];

pub fn validation_rows(stats: &[PointStats]) -> Vec<Vec<String>> {
    stats
        .iter()
        .map(|s| {
            vec![fmt(s.snr), s.method.name().into(), fmt(s.param), fmt(s.mean_pred_err), fmt(s.mean_cost), s.failures.to_string()]
        })
        .collect()
}

pub fn test_rows(stats: &[PointStats]) -> Vec<Vec<String>> {
    stats
        .iter()
        .map(|s| {
            vec![
                fmt(s.snr),
                s.method.name().into(),
                fmt(s.param),
                fmt(s.mean_cost),
                fmt(s.mean_pred_err),
                fmt(s.pred_err_var),
                s.failures.to_string(),
            ]
        })
        .collect()
}

/// Runs `f` on a pool of `jobs` threads (all cores when `None`).
pub fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Experiment(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Solves `points` on `count` realizations at one SNR (`None` = noiseless)
/// and aggregates per point. Realizations run in parallel; results are
/// collected in realization order.
pub fn run_points(
    cfg: &ExperimentConfig,
    ctx: &CampaignContext,
    phase: Phase,
    snr_idx: usize,
    snr: Option<f64>,
    count: usize,
    points: &[GridPoint],
) -> Result<Vec<PointStats>> {
    let per_real: Vec<Vec<Option<Outcome>>> = (0..count)
        .into_par_iter()
        .map(|r| {
            let real = draw_realization(cfg, ctx, snr, stream_id(phase, snr_idx, r))?;
            solve_points(cfg, ctx, &real, points)
        })
        .collect::<Result<_>>()?;
    let label = snr.unwrap_or(f64::INFINITY);
    Ok(points
        .iter()
        .enumerate()
        .map(|(k, &pt)| {
            let outcomes: Vec<_> = per_real.iter().map(|row| row[k]).collect();
            PointStats::from_outcomes(label, pt, &outcomes)
        })
        .collect())
}

fn check_failures(cfg: &ExperimentConfig, stats: &[PointStats]) -> Result<()> {
    let total: usize = stats.iter().map(|s| s.runs).sum();
    let failed: usize = stats.iter().map(|s| s.failures).sum();
    if total > 0 && failed as f64 > cfg.max_failure_rate * total as f64 {
        return Err(Error::Experiment(format!(
            "{failed} of {total} solves failed, above the tolerated rate {}",
            cfg.max_failure_rate
        )));
    }
    Ok(())
}

/// Parameter chosen on validation for one method at one SNR.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChosenParam {
    pub snr: f64,
    pub method: Method,
    pub param: f64,
    pub mean_cost: f64,
}

/// Lowest mean realized cost; among points within 0.1% of it the smallest
/// parameter wins, which keeps the choice stable on flat stretches.
pub fn select_best(curve: &[PointStats]) -> Option<&PointStats> {
    let best = curve.iter().filter(|s| s.mean_cost.is_finite()).map(|s| s.mean_cost).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return None;
    }
    curve
        .iter()
        .filter(|s| s.mean_cost.is_finite() && s.mean_cost <= best * 1.001)
        .min_by(|a, b| a.param.total_cmp(&b.param))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub curves: Vec<PointStats>,
    pub chosen: Vec<ChosenParam>,
}

fn grid_points(cfg: &ExperimentConfig, method: Method) -> Vec<GridPoint> {
    cfg.grid(method).into_iter().map(|param| GridPoint { method, param }).collect()
}

/// Sweeps each method's grid on the validation realizations of every SNR.
pub fn validation_campaign(cfg: &ExperimentConfig) -> Result<ValidationResult> {
    let ctx = CampaignContext::new(cfg)?;
    let mut curves = Vec::new();
    let mut chosen = Vec::new();
    for (i, &snr) in cfg.snr_list.iter().enumerate() {
        let points: Vec<GridPoint> = cfg.methods.iter().flat_map(|&m| grid_points(cfg, m)).collect();
        let stats = with_pool(cfg.jobs, || run_points(cfg, &ctx, Phase::Validation, i, Some(snr), cfg.n_validation, &points))??;
        check_failures(cfg, &stats)?;
        for &method in &cfg.methods {
            let curve: Vec<PointStats> = stats.iter().filter(|s| s.method == method).cloned().collect();
            let best = select_best(&curve)
                .ok_or_else(|| Error::Experiment(format!("no successful solve for {method} at SNR {snr}")))?;
            chosen.push(ChosenParam { snr, method, param: best.param, mean_cost: best.mean_cost });
        }
        curves.extend(stats);
    }
    Ok(ValidationResult { curves, chosen })
}

/// Fresh test realizations at the chosen parameters.
pub fn test_campaign(cfg: &ExperimentConfig, chosen: &[ChosenParam]) -> Result<Vec<PointStats>> {
    let ctx = CampaignContext::new(cfg)?;
    let mut out = Vec::new();
    for (i, &snr) in cfg.snr_list.iter().enumerate() {
        let points: Vec<GridPoint> = cfg
            .methods
            .iter()
            .map(|&method| {
                chosen
                    .iter()
                    .find(|c| c.method == method && c.snr == snr)
                    .map(|c| GridPoint { method, param: c.param })
                    .ok_or_else(|| Error::Experiment(format!("no chosen parameter for {method} at SNR {snr}")))
            })
            .collect::<Result<_>>()?;
        let stats = with_pool(cfg.jobs, || run_points(cfg, &ctx, Phase::Test, i, Some(snr), cfg.n_test, &points))??;
        check_failures(cfg, &stats)?;
        out.extend(stats);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            data_length: 200,
            n_validation: 3,
            n_test: 3,
            snr_list: vec![10.0],
            lambda_g_grid: vec![10.0, 1e3],
            delta_grid: vec![0.01, 1.0],
            jobs: Some(2),
            ..Default::default()
        }
    }

    #[test]
    fn streams_are_disjoint() {
        let mut seen = std::collections::HashSet::new();
        for phase in [Phase::Validation, Phase::Test] {
            for s in 0..3 {
                for r in 0..100 {
                    assert!(seen.insert(stream_id(phase, s, r)));
                }
            }
        }
    }

    #[test]
    fn realization_is_deterministic() {
        let cfg = small_cfg();
        let ctx = CampaignContext::new(&cfg).unwrap();
        let a = draw_realization(&cfg, &ctx, Some(10.0), 5).unwrap();
        let b = draw_realization(&cfg, &ctx, Some(10.0), 5).unwrap();
        let c = draw_realization(&cfg, &ctx, Some(10.0), 6).unwrap();
        assert_eq!(a.data.h, b.data.h);
        assert_eq!(a.target, b.target);
        assert_ne!(a.data.h, c.data.h);
    }

    #[test]
    fn exact_projection_has_zero_prediction_error() {
        // a stiff initial-window penalty leaves no slack to excite the plant
        let cfg = ExperimentConfig { lambda_sigma: 1e10, u_box: None, y_box: None, ..small_cfg() };
        let ctx = CampaignContext::new(&cfg).unwrap();
        let real = draw_realization(&cfg, &ctx, None, 0).unwrap();
        let pt = [GridPoint { method: Method::TrueProjection, param: f64::NAN }];
        let out = solve_points(&cfg, &ctx, &real, &pt).unwrap()[0].unwrap();
        assert!(out.pred_err < 1e-6, "{}", out.pred_err);
    }

    #[test]
    fn selection_prefers_smallest_within_tolerance() {
        let mk = |param, mean_cost| PointStats {
            snr: 10.0,
            method: Method::SoftSquared,
            param,
            runs: 1,
            failures: 0,
            mean_cost,
            mean_pred_err: 0.0,
            pred_err_var: 0.0,
        };
        let curve = [mk(0.1, 5.0), mk(1.0, 4.0), mk(10.0, 3.999), mk(100.0, f64::NAN)];
        assert_eq!(select_best(&curve).unwrap().param, 1.0);
    }

    #[test]
    fn campaign_is_reproducible() {
        let cfg = small_cfg();
        let a = validation_campaign(&cfg).unwrap();
        let b = validation_campaign(&ExperimentConfig { jobs: Some(1), ..cfg.clone() }).unwrap();
        assert_eq!(validation_rows(&a.curves), validation_rows(&b.curves));
        let t = test_campaign(&cfg, &a.chosen).unwrap();
        assert_eq!(t.len(), cfg.methods.len());
        assert!(t.iter().all(|s| s.failures == 0));
    }
}
