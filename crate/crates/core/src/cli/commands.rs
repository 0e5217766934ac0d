//! Eigenvalue curves, approximation-bound sweeps and online adaptation runs.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::campaign::{
    test_campaign, test_rows, validation_campaign, validation_rows, with_pool, ChosenParam, PointStats,
    ValidationResult, TEST_HEADER, VALIDATION_HEADER,
};
use super::config::{log_grid, BoundConfig, EigencurveConfig, ExperimentConfig};
use crate::behavior::{behavior_basis, weighted_projector, Subspace};
use crate::control::{
    online_control_loop, soft_quadratic_map, soft_squared_map, MethodConfig, OnlineConfig, Reference, RunLog,
};
use crate::error::{Error, Result};
use crate::io::save_table;
use crate::linalg;
use crate::plant::{gaussian_vector, CollectedData, PlantSim, TwoDiscParams};
use crate::soft_projection::{error_bound, soft_projector_covariance, soft_projector_spectral, BoundReport, NoiseDecomposition};

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn random_orthonormal(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    normal_matrix(rng, r, c).qr().q()
}

/// Eigenvalue of the squared-penalty map along a direction with data
/// singular value `sigma` (W = I).
pub fn m8_eigenvalue(sigma: f64, delta: f64, alpha: f64) -> f64 {
    let a = sigma * sigma + delta;
    a * a / (a * a + alpha * delta * delta)
}

/// Eigenvalue of the quadratic-penalty map along a direction with data
/// singular value `sigma` (W = I).
pub fn m9_eigenvalue(sigma: f64, delta: f64, alpha_hat: f64) -> f64 {
    let a = sigma * sigma + delta;
    a / (a + alpha_hat)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenRow {
    pub delta: f64,
    pub index: usize,
    pub sigma: f64,
    pub m8_formula: f64,
    pub m9_formula: f64,
    pub m8_eig: f64,
    pub m9_eig: f64,
}

impl EigenRow {
    pub const CSV_HEADER: [&'static str; 7] =
        ["delta", "index", "sigma", "m8_formula", "m9_formula", "m8_eig", "m9_eig"];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            format!("{:e}", self.delta),
            self.index.to_string(),
            format!("{:e}", self.sigma),
            format!("{:e}", self.m8_formula),
            format!("{:e}", self.m9_formula),
            format!("{:e}", self.m8_eig),
            format!("{:e}", self.m9_eig),
        ]
    }

    pub fn max_deviation(&self) -> f64 {
        (self.m8_formula - self.m8_eig).abs().max((self.m9_formula - self.m9_eig).abs())
    }
}

/// Synthetic `H` with exactly the requested nonzero singular values and a
/// few extra null directions.
pub fn synthetic_data(sigmas: &[f64], extra_rows: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let k = sigmas.len();
    let rows = k + extra_rows;
    let cols = 2 * rows;
    let u = random_orthonormal(rng, rows, k);
    let v = random_orthonormal(rng, cols, k);
    u * DMatrix::from_diagonal(&DVector::from_column_slice(sigmas)) * v.transpose()
}

/// Both eigenvalue families over a log grid of `delta`, with
/// `alpha_hat = alpha * delta`, from the closed formulas and from the
/// eigendecomposition of the explicitly assembled maps.
pub fn eigencurves(cfg: &EigencurveConfig, seed: u64) -> Result<Vec<EigenRow>> {
    if cfg.sigmas.is_empty() || cfg.sigmas.iter().any(|&s| !(s > 0.0)) || !(cfg.alpha > 0.0) {
        return Err(Error::Parameter("singular values and alpha must be positive".into()));
    }
    let mut sigmas = cfg.sigmas.clone();
    sigmas.sort_by(|a, b| b.total_cmp(a));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = synthetic_data(&sigmas, 3, &mut rng);
    let n = h.nrows();
    let eye = DMatrix::identity(n, n);
    let mut rows = Vec::new();
    for delta in log_grid(cfg.delta_min, cfg.delta_max, cfg.points) {
        let alpha_hat = cfg.alpha * delta;
        // the covariance form keeps I - P accurate where P is close to I
        let proj = soft_projector_covariance(&h, &eye, delta)?;
        // both maps are symmetric at W = I and their spectra are increasing in sigma
        let mut e8 = linalg::sym_eigenvalues(&soft_squared_map(&proj, &eye, cfg.alpha)?);
        let mut e9 = linalg::sym_eigenvalues(&soft_quadratic_map(&proj, &eye, alpha_hat)?);
        e8.reverse();
        e9.reverse();
        for (i, &s) in sigmas.iter().enumerate() {
            rows.push(EigenRow {
                delta,
                index: i,
                sigma: s,
                m8_formula: m8_eigenvalue(s, delta, cfg.alpha),
                m9_formula: m9_eigenvalue(s, delta, alpha_hat),
                m8_eig: e8[i],
                m9_eig: e9[i],
            });
        }
    }
    Ok(rows)
}

/// Synthetic `H = B S + E` on the case-study behavior. `B` is the
/// orthonormal behavior basis, `S` standard normal, and `E` white noise
/// scaled so that the mean squared entry of `B S` over that of `E` equals
/// `cfg.snr`. With `noisy = false`, `E = 0`.
pub fn bound_instance(exp: &ExperimentConfig, cfg: &BoundConfig, noisy: bool, seed: u64) -> Result<NoiseDecomposition> {
    let model = exp.model()?;
    let layout = exp.layout()?;
    let b = behavior_basis(&model.a, &model.b, &model.c, layout.sig.l)?.basis;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = normal_matrix(&mut rng, b.ncols(), cfg.columns);
    let signal = &b * &s;
    let e = if noisy {
        let power = signal.norm_squared() / signal.len() as f64;
        normal_matrix(&mut rng, b.nrows(), cfg.columns) * (power / cfg.snr).sqrt()
    } else {
        DMatrix::zeros(b.nrows(), cfg.columns)
    };
    NoiseDecomposition::new(b, s, e)
}

/// `(gamma(delta) report, ||P~_H^W - P_B^W||_2)` over the configured grid.
pub fn bound_sweep(decomp: &NoiseDecomposition, w: &DMatrix<f64>, deltas: &[f64]) -> Result<Vec<(BoundReport, f64)>> {
    let exact = weighted_projector(&Subspace { basis: decomp.b.clone(), orthonormal: true }, w)?;
    let h = decomp.h();
    deltas
        .iter()
        .map(|&delta| {
            let report = error_bound(decomp, w, delta)?;
            let gap = linalg::spectral_norm(&(soft_projector_spectral(&h, w, delta)? - &exact));
            Ok((report, gap))
        })
        .collect()
}

fn bound_rows(sweep: &[(BoundReport, f64)]) -> Vec<Vec<String>> {
    sweep.iter().map(|(r, g)| r.csv_row(*g).to_vec()).collect()
}

/// `gap <= gamma` up to rounding. Without noise the bound holds with
/// equality, and the gap of O(1) projector entries carries an absolute
/// rounding floor near `1e-15`.
pub fn within_bound(report: &BoundReport, gap: f64) -> bool {
    gap <= report.gamma * (1.0 + 1e-9) + 1e-12
}

/// Index of the smallest `gamma` if it lies strictly inside the grid.
pub fn interior_minimizer(sweep: &[(BoundReport, f64)]) -> Option<usize> {
    let k = sweep
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .0.gamma.total_cmp(&b.1 .0.gamma))
        .map(|(k, _)| k)?;
    (k > 0 && k + 1 < sweep.len()).then_some(k)
}

/// Outcome of one paired adaptive/frozen run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlinePairSummary {
    pub run: usize,
    pub adaptive_second_half: f64,
    pub frozen_second_half: f64,
}

impl OnlinePairSummary {
    pub const CSV_HEADER: [&'static str; 4] = ["run", "adaptive_second_half", "frozen_second_half", "adaptive_wins"];

    pub fn adaptive_wins(&self) -> bool {
        self.adaptive_second_half < self.frozen_second_half
    }

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.run.to_string(),
            format!("{:e}", self.adaptive_second_half),
            format!("{:e}", self.frozen_second_half),
            self.adaptive_wins().to_string(),
        ]
    }
}

/// Adaptive and frozen logs from identical plants, noise and probes.
pub struct OnlinePair {
    pub adaptive: RunLog,
    pub frozen: RunLog,
    pub summary: OnlinePairSummary,
}

/// Runs the adaptive and the frozen controller on the same realization:
/// excitation data from the zero state, then closed loop with a coupling
/// stiffness change at `change_at`. Costs are summed over the second half.
pub fn online_pair(exp: &ExperimentConfig, run: usize) -> Result<OnlinePair> {
    let oc = &exp.online;
    let model = exp.model()?;
    let layout = exp.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(exp.seed);
    rng.set_stream((3 << 48) | run as u64);
    let mut plant_rng = ChaCha8Rng::seed_from_u64(exp.seed);
    plant_rng.set_stream((4 << 48) | run as u64);
    let mut plant = PlantSim::new(model.clone(), oc.process_std.clone(), oc.measurement_std.clone(), plant_rng);

    let mut initial = CollectedData { u: vec![], y: vec![], y_signal: vec![], measurement_std: oc.measurement_std.clone() };
    let input_std = vec![exp.input_std; model.m()];
    for _ in 0..oc.initial_length {
        let u = gaussian_vector(&mut rng, &input_std);
        let s = plant.apply(&u)?;
        initial.u.push(u);
        initial.y.push(s.y_measured);
        initial.y_signal.push(s.y_true);
    }
    let changed = TwoDiscParams { spring: oc.spring_after, ground_spring: oc.ground_spring_after, ..exp.plant }.model()?;
    let mut method = MethodConfig::new(oc.method);
    method.alpha = oc.alpha;
    method.alpha_hat = oc.alpha_hat;
    let base = OnlineConfig {
        layout,
        weights: exp.weights(&layout)?,
        method,
        epsilon: oc.epsilon,
        rebase_every: oc.rebase_every,
        adapt: true,
        reference: Reference::switching(oc.reference_levels.clone(), oc.reference_period, model.m()),
        u_box: exp.u_box.clone(),
        y_box: exp.y_box.clone(),
        probe_std: oc.probe_std,
        probe_seed: exp.seed.wrapping_add(run as u64),
        plant_change: Some((oc.change_at, changed)),
        settings: Default::default(),
    };
    let frozen_cfg = OnlineConfig { adapt: false, ..base.clone() };
    let mut plant_frozen = plant.clone();
    let adaptive = online_control_loop(&mut plant, &initial, &base, oc.t_sim)?;
    let frozen = online_control_loop(&mut plant_frozen, &initial, &frozen_cfg, oc.t_sim)?;
    let half = oc.t_sim / 2;
    let summary = OnlinePairSummary {
        run,
        adaptive_second_half: adaptive.cost_between(half, oc.t_sim),
        frozen_second_half: frozen.cost_between(half, oc.t_sim),
    };
    Ok(OnlinePair { adaptive, frozen, summary })
}

/// `online.runs` seeded pairs in parallel.
pub fn online_campaign(exp: &ExperimentConfig) -> Result<Vec<OnlinePairSummary>> {
    with_pool(exp.jobs, || {
        (0..exp.online.runs)
            .into_par_iter()
            .map(|r| online_pair(exp, r).map(|p| p.summary))
            .collect::<Result<Vec<_>>>()
    })?
}

fn out_dir(exp: &ExperimentConfig) -> Result<&Path> {
    fs::create_dir_all(&exp.out_dir)?;
    Ok(exp.out_dir.as_path())
}

/// Writes `validation_curves.csv` and `chosen_params.json`.
pub fn cmd_validate(exp: &ExperimentConfig) -> Result<ValidationResult> {
    let res = validation_campaign(exp)?;
    let dir = out_dir(exp)?;
    save_table(dir.join("validation_curves.csv"), &VALIDATION_HEADER, validation_rows(&res.curves))?;
    fs::write(dir.join("chosen_params.json"), serde_json::to_string_pretty(&res.chosen)?)?;
    Ok(res)
}

/// Writes `test_results.csv`. Parameters come from `chosen` or, when
/// absent, from a fresh validation campaign.
pub fn cmd_test(exp: &ExperimentConfig, chosen: Option<Vec<ChosenParam>>) -> Result<Vec<PointStats>> {
    let chosen = match chosen {
        Some(c) => c,
        None => cmd_validate(exp)?.chosen,
    };
    let stats = test_campaign(exp, &chosen)?;
    save_table(out_dir(exp)?.join("test_results.csv"), &TEST_HEADER, test_rows(&stats))?;
    Ok(stats)
}

pub fn load_chosen(path: impl AsRef<Path>) -> Result<Vec<ChosenParam>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Writes `eigencurves.csv`; fails if a formula and its eigendecomposition
/// disagree by more than `1e-9`.
pub fn cmd_eigencurves(exp: &ExperimentConfig) -> Result<Vec<EigenRow>> {
    let rows = eigencurves(&exp.eigencurves, exp.seed)?;
    save_table(out_dir(exp)?.join("eigencurves.csv"), &EigenRow::CSV_HEADER, rows.iter().map(EigenRow::csv_row))?;
    let worst = rows.iter().map(EigenRow::max_deviation).fold(0.0, f64::max);
    if worst > 1e-9 {
        return Err(Error::Experiment(format!("eigenvalue formulas deviate by {worst:e}")));
    }
    Ok(rows)
}

/// Writes `bound.csv` (noisy) and `bound_clean.csv` (E = 0); fails when an
/// empirical gap exceeds its bound.
pub fn cmd_bound(exp: &ExperimentConfig) -> Result<Vec<(BoundReport, f64)>> {
    let cfg = &exp.bound;
    let deltas = log_grid(cfg.delta_min, cfg.delta_max, cfg.points);
    let noisy = bound_instance(exp, cfg, true, exp.seed)?;
    let eye = DMatrix::identity(noisy.b.nrows(), noisy.b.nrows());
    let sweep = bound_sweep(&noisy, &eye, &deltas)?;
    let clean = bound_sweep(&bound_instance(exp, cfg, false, exp.seed)?, &eye, &deltas)?;
    let dir = out_dir(exp)?;
    save_table(dir.join("bound.csv"), &BoundReport::CSV_HEADER, bound_rows(&sweep))?;
    save_table(dir.join("bound_clean.csv"), &BoundReport::CSV_HEADER, bound_rows(&clean))?;
    if let Some((r, g)) = sweep.iter().chain(&clean).find(|(r, g)| !within_bound(r, *g)) {
        return Err(Error::Experiment(format!("gap {g:e} exceeds bound {:e} at delta {:e}", r.gamma, r.delta)));
    }
    Ok(sweep)
}

/// Writes the logs of run 0 and `online_summary.csv` over all runs.
pub fn cmd_online(exp: &ExperimentConfig) -> Result<Vec<OnlinePairSummary>> {
    let dir = out_dir(exp)?;
    let first = online_pair(exp, 0)?;
    first.adaptive.save_csv(dir.join("online_adaptive.csv"))?;
    first.frozen.save_csv(dir.join("online_frozen.csv"))?;
    let runs = online_campaign(exp)?;
    save_table(dir.join("online_summary.csv"), &OnlinePairSummary::CSV_HEADER, runs.iter().map(OnlinePairSummary::csv_row))?;
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigencurves_match_formulas() {
        let rows = eigencurves(&EigencurveConfig::default(), 1).unwrap();
        assert_eq!(rows.len(), 5 * 40);
        let worst = rows.iter().map(EigenRow::max_deviation).fold(0.0, f64::max);
        assert!(worst < 1e-9, "{worst:e}");
    }

    #[test]
    fn small_delta_limits() {
        let alpha = 1e6;
        for s in [1000.0, 20.0] {
            let d = 1e-12;
            assert!((m8_eigenvalue(s, d, alpha) - 1.0).abs() < 1e-9);
            let ah = 1.0;
            assert!((m9_eigenvalue(s, d, ah) - s * s / (s * s + ah)).abs() < 1e-9);
        }
    }

    #[test]
    fn synthetic_data_has_requested_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = synthetic_data(&[10.0, 2.0], 2, &mut rng);
        let s = linalg::singular_values(&h);
        assert!((s[0] - 10.0).abs() < 1e-12 && (s[1] - 2.0).abs() < 1e-12 && s[2] < 1e-12);
    }

    #[test]
    fn bound_holds_and_has_interior_minimum() {
        let exp = ExperimentConfig::default();
        let cfg = &exp.bound;
        let deltas = log_grid(cfg.delta_min, cfg.delta_max, cfg.points);
        let d = bound_instance(&exp, cfg, true, 11).unwrap();
        let eye = DMatrix::identity(d.b.nrows(), d.b.nrows());
        let sweep = bound_sweep(&d, &eye, &deltas).unwrap();
        assert!(sweep.iter().all(|(r, g)| *g <= r.gamma));
        let k = interior_minimizer(&sweep).unwrap();
        assert!(sweep[..k].windows(2).all(|w| w[1].0.gamma < w[0].0.gamma));
        assert!(sweep[k..].windows(2).all(|w| w[1].0.gamma > w[0].0.gamma));
    }

    #[test]
    fn clean_gap_vanishes_with_delta() {
        let exp = ExperimentConfig::default();
        let d = bound_instance(&exp, &exp.bound, false, 2).unwrap();
        let eye = DMatrix::identity(d.b.nrows(), d.b.nrows());
        let sweep = bound_sweep(&d, &eye, &[1e-2, 1e-4, 1e-6]).unwrap();
        assert!(sweep[0].1 > sweep[1].1 && sweep[1].1 > sweep[2].1);
        assert!(sweep[2].1 < 1e-7, "{}", sweep[2].1);
        assert!(sweep.iter().all(|(r, g)| within_bound(r, *g)));
    }
}
