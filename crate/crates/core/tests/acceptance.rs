//! Acceptance suite. Runs every criterion, prints one line per criterion
//! and exits nonzero if any of them fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use softproj::behavior::{behavior_basis, build_data_matrix, gap_metric, weighted_projector, Subspace};
use softproj::cli::{self, ExperimentConfig, PointStats};
use softproj::control::{deepc_closed_form, soft_quadratic_map, Method};
use softproj::linalg::{numerical_rank, truncated_left_basis};
use softproj::plant::{case_study_plant, collect_excitation_data, NoiseConfig, PlantModel};
use softproj::qp::{solve, QpProblem, QpStatus};
use softproj::recursive::RecursiveState;
use softproj::soft_projection::{
    error_bound, soft_projector_covariance, soft_projector_direct, soft_projector_spectral, unweighted_error_bound,
    NoiseDecomposition,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(rng))
}

/// Random SPD weight with condition number at most `cond`.
fn spd_weight(n: usize, cond: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let q = gaussian(n, n, rng).qr().q();
    let d = DVector::from_fn(n, |_, _| cond.powf(rng.random::<f64>()));
    let mut w = &q * DMatrix::from_diagonal(&d) * q.transpose();
    w = (&w + w.transpose()) * 0.5;
    w
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

fn projector_forms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(4..=40);
        let d = rng.random_range(1..=400);
        let h = gaussian(n, d, &mut rng);
        let w = spd_weight(n, 100.0, &mut rng);
        for delta in [1e-3, 1.0, 1e3] {
            let a = soft_projector_direct(&h, &w, delta).unwrap();
            let b = soft_projector_covariance(&h, &w, delta).unwrap();
            worst = worst.max(rel(&a.p, &b.p));
        }
    }
    let took = start.elapsed();
    outcome(
        worst <= 1e-8 && took < Duration::from_secs(10),
        format!("max relative difference {worst:.2e}, {took:.2?} for 50 instances"),
    )
}

fn deepc_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(4..=30);
        let d = rng.random_range(2..=120);
        let h = gaussian(n, d, &mut rng);
        let w = spd_weight(n, 10.0, &mut rng);
        let t = DVector::from_fn(n, |_, _| normal(&mut rng));
        let lambda = 10f64.powf(rng.random_range(-2.0..2.0));
        let (w_star, _) = deepc_closed_form(&h, &w, &t, lambda).unwrap();
        let p = soft_projector_spectral(&h, &w, lambda).unwrap();
        let explicit = p * (&w * &t);
        worst = worst.max((&w_star - &explicit).norm() / explicit.norm());
    }
    outcome(worst <= 1e-10, format!("max relative difference {worst:.2e} over 50 instances"))
}

fn random_plant(rng: &mut ChaCha8Rng) -> PlantModel {
    let n = rng.random_range(1..=4);
    let m = rng.random_range(1..=2);
    let p = rng.random_range(1..=2);
    loop {
        let mut a = gaussian(n, n, rng);
        let rho = a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        a *= rng.random_range(0.5..0.95) / rho.max(1e-3);
        let plant = PlantModel::new(a, gaussian(n, m, rng), gaussian(p, n, rng), DMatrix::zeros(n, 1), 1.0).unwrap();
        if plant.is_reachable() && plant.is_observable() {
            return plant;
        }
    }
}

fn bound_holds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let deltas = cli::log_grid(1e-3, 1e3, 7);
    let (mut violations, mut checks) = (0, 0);
    let mut worst_ratio: f64 = 0.0;
    let mut worst_reduction: f64 = 0.0;
    for _ in 0..100 {
        let plant = random_plant(&mut rng);
        let l = 6;
        let b = behavior_basis(&plant.a, &plant.b, &plant.c, l).unwrap().basis;
        let d = rng.random_range(b.nrows()..=3 * b.nrows());
        let s = gaussian(b.ncols(), d, &mut rng);
        let clean = &b * &s;
        let snr = rng.random_range(3.0..100.0);
        let noise_std = (clean.norm_squared() / clean.len() as f64 / snr).sqrt();
        let e = gaussian(b.nrows(), d, &mut rng) * noise_std;
        let decomp = NoiseDecomposition::new(b.clone(), s, e).unwrap();
        let h = decomp.h();
        let w = spd_weight(b.nrows(), 5.0, &mut rng);
        let exact = weighted_projector(&Subspace { basis: b.clone(), orthonormal: true }, &w).unwrap();
        let eye = DMatrix::identity(b.nrows(), b.nrows());
        for &delta in &deltas {
            let r = error_bound(&decomp, &w, delta).unwrap();
            let gap = (soft_projector_spectral(&h, &w, delta).unwrap() - &exact).norm_l2_spectral();
            checks += 1;
            if !cli::within_bound(&r, gap) {
                violations += 1;
            }
            worst_ratio = worst_ratio.max(gap / r.gamma);
            let at_identity = error_bound(&decomp, &eye, delta).unwrap().gamma;
            let direct = unweighted_error_bound(&decomp, delta);
            worst_reduction = worst_reduction.max((at_identity - direct).abs() / direct);
        }
    }
    outcome(
        violations == 0 && worst_reduction <= 1e-12,
        format!(
            "{violations} violations in {checks} checks (largest gap/bound {worst_ratio:.3}), identity-weight reduction off by {worst_reduction:.1e}"
        ),
    )
}

trait SpectralNorm {
    fn norm_l2_spectral(&self) -> f64;
}

impl SpectralNorm for DMatrix<f64> {
    fn norm_l2_spectral(&self) -> f64 {
        self.singular_values().max()
    }
}

fn quadratic_limit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let deltas: Vec<f64> = (1..=9).map(|k| 10f64.powi(-k)).collect();
    let mut all_ok = true;
    let mut last_worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(4..=20);
        let h = gaussian(n, n + rng.random_range(1..=40), &mut rng);
        let w = spd_weight(n, 10.0, &mut rng);
        let t = DVector::from_fn(n, |_, _| normal(&mut rng));
        let lambda = 10f64.powf(rng.random_range(-1.0..2.0));
        let (deepc, _) = deepc_closed_form(&h, &w, &t, lambda).unwrap();
        let eye = DMatrix::identity(n, n);
        let gaps: Vec<f64> = deltas
            .iter()
            .map(|&delta| {
                let proj = soft_projector_covariance(&h, &eye, delta).unwrap();
                let w9 = soft_quadratic_map(&proj, &w, lambda).unwrap() * &t;
                (w9 - &deepc).norm() / deepc.norm()
            })
            .collect();
        let decreasing = gaps.windows(2).all(|g| g[1] < g[0]);
        let last = *gaps.last().unwrap();
        last_worst = last_worst.max(last);
        all_ok &= decreasing && last <= 1e-6;
    }
    outcome(all_ok, format!("20 instances, largest relative gap at delta = 1e-9: {last_worst:.2e}"))
}

fn eigen_formulas() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = ExperimentConfig::default();
    exp.out_dir = dir.path().to_path_buf();
    let start = Instant::now();
    let result = cli::cmd_eigencurves(&exp);
    let took = start.elapsed();
    match result {
        Ok(rows) => {
            let worst = rows.iter().map(|r| r.max_deviation()).fold(0.0, f64::max);
            let written = dir.path().join("eigencurves.csv").exists();
            outcome(
                worst <= 1e-9 && written && took < Duration::from_secs(5),
                format!("{} rows, max deviation {worst:.1e}, CSV in {took:.2?}", rows.len()),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn per_update_time(d: usize, rng: &mut ChaCha8Rng) -> f64 {
    let n = 42;
    let h = gaussian(n, d, rng);
    let mut st = RecursiveState::init(&h, &DMatrix::identity(n, n), 1e-3).unwrap().with_rebase_every(None);
    let cols: Vec<DVector<f64>> = (0..300).map(|_| DVector::from_fn(n, |_, _| normal(rng))).collect();
    let start = Instant::now();
    for c in &cols {
        st.update(c).unwrap();
    }
    start.elapsed().as_secs_f64() / cols.len() as f64
}

fn recursion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let n = 30;
    let eye = DMatrix::identity(n, n);
    let h0 = gaussian(n, 40, &mut rng);
    let cols: Vec<DVector<f64>> = (0..200).map(|_| DVector::from_fn(n, |_, _| normal(&mut rng))).collect();

    let mut frozen = RecursiveState::init(&h0, &eye, 1e-3).unwrap().with_frozen_schedule(true).with_rebase_every(None);
    let delta0 = frozen.delta_t;
    for c in &cols {
        frozen.update(c).unwrap();
    }
    let mut all = h0.clone().resize_horizontally(40 + cols.len(), 0.0);
    for (j, c) in cols.iter().enumerate() {
        all.set_column(40 + j, c);
    }
    let batch = soft_projector_spectral(&all, &eye, delta0).unwrap();
    let frozen_err = (&frozen.projector.p - &batch).norm();

    let mut live = RecursiveState::init(&h0, &eye, 1e-3).unwrap().with_rebase_every(Some(100));
    for c in cols.iter().chain(cols.iter().take(50)) {
        live.update(c).unwrap();
    }
    let mut all_live = all.clone().resize_horizontally(all.ncols() + 50, 0.0);
    for (j, c) in cols.iter().take(50).enumerate() {
        all_live.set_column(240 + j, c);
    }
    let batch_live = soft_projector_spectral(&all_live, &eye, live.delta_t).unwrap();
    let live_drift = rel(&live.projector.p, &batch_live);

    let times: Vec<f64> = [100, 1000, 5000].iter().map(|&d| per_update_time(d, &mut rng)).collect();
    let spread = times.iter().cloned().fold(0.0, f64::max) / times.iter().cloned().fold(f64::INFINITY, f64::min);
    outcome(
        frozen_err <= 1e-8 && live_drift <= 0.05 && spread <= 2.0,
        format!(
            "frozen error {frozen_err:.1e}, live drift {:.2}%, per-update time {:.1}/{:.1}/{:.1} us at D = 100/1000/5000",
            100.0 * live_drift,
            1e6 * times[0],
            1e6 * times[1],
            1e6 * times[2]
        ),
    )
}

/// Exhaustive active-set search for `min x'Px/2 + q'x` on `lo <= x <= hi`.
fn brute_force_box(p: &DMatrix<f64>, q: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    let n = q.len();
    let mut best = f64::INFINITY;
    let mut code = vec![0u8; n];
    loop {
        let free: Vec<usize> = (0..n).filter(|&i| code[i] == 0).collect();
        let mut x = DVector::from_fn(n, |i, _| match code[i] {
            1 => lo[i],
            2 => hi[i],
            _ => 0.0,
        });
        if !free.is_empty() {
            let pff = DMatrix::from_fn(free.len(), free.len(), |a, b| p[(free[a], free[b])]);
            let rhs = DVector::from_fn(free.len(), |a, _| {
                -q[free[a]] - (0..n).filter(|&j| code[j] != 0).map(|j| p[(free[a], j)] * x[j]).sum::<f64>()
            });
            let xf = pff.cholesky().expect("P is SPD").solve(&rhs);
            for (a, &i) in free.iter().enumerate() {
                x[i] = xf[a];
            }
        }
        let feasible = (0..n).all(|i| x[i] >= lo[i] - 1e-12 && x[i] <= hi[i] + 1e-12);
        if feasible {
            best = best.min(0.5 * x.dot(&(p * &x)) + q.dot(&x));
        }
        let mut k = 0;
        while k < n {
            code[k] += 1;
            if code[k] < 3 {
                break;
            }
            code[k] = 0;
            k += 1;
        }
        if k == n {
            return best;
        }
    }
}

fn qp_solver() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst_free: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=12);
        let p = spd_weight(n, 1e3, &mut rng);
        let q = DVector::from_fn(n, |_, _| normal(&mut rng));
        let sol = solve(&QpProblem::unconstrained(p.clone(), q.clone()).unwrap());
        let exact = -p.cholesky().unwrap().solve(&q);
        worst_free = worst_free.max((&sol.x - &exact).norm() / exact.norm());
    }
    let mut worst_box: f64 = 0.0;
    let mut non_optimal = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=12);
        let p = spd_weight(n, 1e2, &mut rng);
        let q = DVector::from_fn(n, |_, _| 3.0 * normal(&mut rng));
        let lo = DVector::from_fn(n, |_, _| -rng.random_range(0.1..1.5));
        let hi = DVector::from_fn(n, |_, _| rng.random_range(0.1..1.5));
        let sol = solve(&QpProblem::new(p.clone(), q.clone(), DMatrix::identity(n, n), lo.clone(), hi.clone()).unwrap());
        if sol.status != QpStatus::Optimal {
            non_optimal += 1;
        }
        let reference = brute_force_box(&p, &q, &lo, &hi);
        worst_box = worst_box.max((sol.objective - reference).abs() / reference.abs().max(1e-12));
    }
    outcome(
        worst_free <= 1e-6 && worst_box <= 1e-5 && non_optimal == 0,
        format!("unconstrained {worst_free:.1e}, box objective {worst_box:.1e}, {non_optimal} non-optimal"),
    )
}

fn fundamental_lemma() -> Outcome {
    let plant = case_study_plant();
    let l = 14;
    let data = collect_excitation_data(&plant, 300, 1.0, &NoiseConfig::noiseless(&plant), &mut ChaCha8Rng::seed_from_u64(8))
        .unwrap();
    let h = build_data_matrix(&data.u, &data.y, l, 2, 12).unwrap();
    let rank = numerical_rank(&h.h);
    let expected = plant.m() * l + plant.n();
    let truncated = Subspace::new(truncated_left_basis(&h.h, expected)).unwrap();
    let exact = behavior_basis(&plant.a, &plant.b, &plant.c, l).unwrap();
    let gap = gap_metric(&exact, &truncated).unwrap();
    outcome(rank == expected && gap <= 1e-6, format!("rank {rank} (expected {expected}), gap {gap:.1e}"))
}

fn find<'a>(stats: &'a [PointStats], snr: f64, method: Method) -> &'a PointStats {
    stats.iter().find(|s| s.snr == snr && s.method == method).expect("campaign covers every pair")
}

fn campaign() -> Vec<(String, Outcome)> {
    let mut exp = ExperimentConfig::default();
    exp.jobs = Some(8);
    let start = Instant::now();
    let result = cli::validation_campaign(&exp).and_then(|v| cli::test_campaign(&exp, &v.chosen));
    let took = start.elapsed();
    let stats = match result {
        Ok(s) => s,
        Err(e) => return vec![("campaign".into(), outcome(false, e.to_string()))],
    };
    let rows: Vec<(f64, &PointStats, &PointStats)> = exp
        .snr_list
        .iter()
        .map(|&snr| (snr, find(&stats, snr, Method::DeepcL2), find(&stats, snr, Method::SoftSquared)))
        .collect();
    let cost_line = rows
        .iter()
        .map(|(snr, d, s)| format!("SNR {snr}: {:.3} vs {:.3}", d.mean_cost, s.mean_cost))
        .collect::<Vec<_>>()
        .join(", ");
    let var_line = rows
        .iter()
        .map(|(snr, d, s)| format!("SNR {snr}: {:.4} vs {:.4}", d.pred_err_var, s.pred_err_var))
        .collect::<Vec<_>>()
        .join(", ");
    let gap = |snr: f64| {
        let (_, d, s) = rows.iter().find(|r| r.0 == snr).unwrap();
        d.mean_cost - s.mean_cost
    };
    let (g10, g3) = (gap(10.0), gap(3.0));
    vec![
        (
            "(a) cost of soft squared <= DeePC".into(),
            outcome(rows.iter().all(|(_, d, s)| s.mean_cost <= d.mean_cost), format!("DeePC vs soft squared, {cost_line}")),
        ),
        ("(b) gap grows with noise".into(), outcome(g3 > g10, format!("gap {g10:.3} at SNR 10, {g3:.3} at SNR 3"))),
        (
            "(c) pred-err variance of soft squared <= DeePC".into(),
            outcome(rows.iter().all(|(_, d, s)| s.pred_err_var <= d.pred_err_var), format!("DeePC vs soft squared, {var_line}")),
        ),
        (
            "runtime".into(),
            outcome(took < Duration::from_secs(1800), format!("{took:.1?} for validation and test")),
        ),
    ]
}

fn online() -> Outcome {
    let exp = ExperimentConfig::default();
    match cli::online_campaign(&exp) {
        Ok(runs) => {
            let wins = runs.iter().filter(|r| r.adaptive_wins()).count();
            outcome(wins >= 90, format!("adaptive lower second-half cost in {wins}/{} runs", runs.len()))
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: &str, name: &str, o: Outcome| {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:<3} {verdict}  {name}: {}", o.detail);
        if !o.pass {
            failed += 1;
        }
    };
    report("1", "projector forms agree", projector_forms());
    report("2", "DeePC equals explicit projector map", deepc_identity());
    report("3", "error bound holds", bound_holds());
    report("4", "quadratic penalty converges to DeePC", quadratic_limit());
    report("5", "eigenvalue formulas", eigen_formulas());
    report("6", "recursive update", recursion());
    report("7", "QP solver", qp_solver());
    report("8", "fundamental lemma", fundamental_lemma());
    for (name, o) in campaign() {
        report("9", &name, o);
    }
    report("10", "online adaptation", online());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance check(s) failed");
        ExitCode::FAILURE
    }
}
