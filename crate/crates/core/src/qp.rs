//! Dense convex QP solver for
//!
//! ```text
//! minimize    1/2 x^T P x + q^T x
//! subject to  l <= A x <= u
//! ```
//!
//! Operator splitting (ADMM) with a fixed penalty, over-relaxation, Ruiz
//! equilibration of the KKT matrix, cost scaling and a final active-set
//! polish. Problems here are small and dense (decision vectors of a few dozen
//! entries), so the reduced KKT matrix is factored once per solve.

use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::behavior::Signature;
use crate::error::{Error, Result};
use crate::io;
use crate::linalg;

/// Bounds beyond this magnitude are treated as infinite.
const INF_BOUND: f64 = 1e20;

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        a: DMatrix<f64>,
        l: DVector<f64>,
        u: DVector<f64>,
    ) -> Result<Self> {
        let n = q.len();
        if p.shape() != (n, n) {
            return Err(Error::Dimension(format!("P is {:?}, expected {n}x{n}", p.shape())));
        }
        if a.ncols() != n || a.nrows() != l.len() || l.len() != u.len() {
            return Err(Error::Dimension(format!(
                "A is {:?}, l has {}, u has {} entries for n = {n}",
                a.shape(),
                l.len(),
                u.len()
            )));
        }
        let scale = p.amax().max(1.0);
        if linalg::asymmetry(&p) > 1e-10 * scale {
            return Err(Error::Definiteness("P is not symmetric".into()));
        }
        if n > 0 {
            let min_eig = linalg::sym_eigenvalues(&p)[0];
            if min_eig < -1e-9 * p.norm().max(1.0) {
                return Err(Error::Definiteness(format!(
                    "P has negative eigenvalue {min_eig:e}"
                )));
            }
        }
        for i in 0..l.len() {
            if l[i].is_nan() || u[i].is_nan() || l[i] > u[i] {
                return Err(Error::Bounds(format!("row {i}: l = {} > u = {}", l[i], u[i])));
            }
        }
        Ok(Self { p: linalg::symmetrized(&p), q, a, l, u })
    }

    /// Problem without constraints.
    pub fn unconstrained(p: DMatrix<f64>, q: DVector<f64>) -> Result<Self> {
        let n = q.len();
        Self::new(p, q, DMatrix::zeros(0, n), DVector::zeros(0), DVector::zeros(0))
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn k(&self) -> usize {
        self.l.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    /// Scales rows of `(A, l, u)` by positive factors (same feasible set).
    pub fn scale_rows(&self, factors: &[f64]) -> Result<Self> {
        if factors.len() != self.k() || factors.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::Parameter("row scale factors must be positive, one per row".into()));
        }
        let mut a = self.a.clone();
        let mut l = self.l.clone();
        let mut u = self.u.clone();
        for (i, &f) in factors.iter().enumerate() {
            a.row_mut(i).scale_mut(f);
            l[i] *= f;
            u[i] *= f;
        }
        Self::new(self.p.clone(), self.q.clone(), a, l, u)
    }

    /// Dumps `P` and `A` as `(row, col, value)` triplets plus `q` and bounds.
    pub fn dump_csv(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let triplets = |m: &DMatrix<f64>| {
            let mut rows = Vec::new();
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    if m[(i, j)] != 0.0 {
                        rows.push(vec![i.to_string(), j.to_string(), format!("{:e}", m[(i, j)])]);
                    }
                }
            }
            rows
        };
        io::save_table(dir.join("P.csv"), &["row", "col", "value"], triplets(&self.p))?;
        io::save_table(dir.join("A.csv"), &["row", "col", "value"], triplets(&self.a))?;
        io::save_table(
            dir.join("q.csv"),
            &["q"],
            self.q.iter().map(|v| vec![format!("{v:e}")]),
        )?;
        io::save_table(
            dir.join("bounds.csv"),
            &["l", "u"],
            self.l
                .iter()
                .zip(self.u.iter())
                .map(|(l, u)| vec![format!("{l:e}"), format!("{u:e}")]),
        )?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Constraint multipliers (positive on active upper bounds).
    pub y: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub polished: bool,
    /// Fixed-point residual of the splitting iteration, sampled every
    /// `merit_every` iterations.
    pub merit_history: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub scaling_passes: usize,
    pub polish: bool,
    /// First iteration at which the primal infeasibility certificate is checked.
    pub infeasibility_after: usize,
    pub eps_prim_inf: f64,
    pub merit_every: usize,
    /// Rebalances `rho` from the residual ratio every `adaptive_rho_interval`
    /// iterations; zero keeps `rho` fixed.
    pub adaptive_rho_interval: usize,
    /// Refactorises only when the estimate moves by more than this factor.
    pub adaptive_rho_tolerance: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-8,
            eps_rel: 1e-6,
            max_iter: 20_000,
            rho: 1.0,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_passes: 3,
            polish: true,
            infeasibility_after: 1000,
            eps_prim_inf: 1e-6,
            merit_every: 25,
            adaptive_rho_interval: 25,
            adaptive_rho_tolerance: 5.0,
        }
    }
}

/// Solves with default settings.
pub fn solve(problem: &QpProblem) -> QpSolution {
    solve_with(problem, &QpSettings::default())
}

struct Scaled {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn norm_floor(v: f64) -> f64 {
    if v < 1e-4 {
        1.0
    } else {
        v.min(1e4)
    }
}

/// Ruiz equilibration of `[P A^T; A 0]` followed by cost scaling.
fn equilibrate(prob: &QpProblem, passes: usize) -> Scaled {
    let n = prob.n();
    let k = prob.k();
    let mut p = prob.p.clone();
    let mut q = prob.q.clone();
    let mut a = prob.a.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(k, 1.0);
    for _ in 0..passes {
        let dd = DVector::from_fn(n, |j, _| {
            let pc = p.column(j).amax();
            let ac = if k > 0 { a.column(j).amax() } else { 0.0 };
            1.0 / norm_floor(pc.max(ac)).sqrt()
        });
        let de = DVector::from_fn(k, |i, _| 1.0 / norm_floor(a.row(i).amax()).sqrt());
        for j in 0..n {
            for i in 0..n {
                p[(i, j)] *= dd[i] * dd[j];
            }
            for i in 0..k {
                a[(i, j)] *= de[i] * dd[j];
            }
            q[j] *= dd[j];
        }
        d.component_mul_assign(&dd);
        e.component_mul_assign(&de);
    }
    let mean_col = if n > 0 {
        (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64
    } else {
        0.0
    };
    let c = 1.0 / norm_floor(mean_col.max(q.amax()));
    p *= c;
    q *= c;
    let scale_bound = |b: f64, s: f64| if b.abs() >= INF_BOUND { b } else { b * s };
    let l = DVector::from_fn(k, |i, _| scale_bound(prob.l[i], e[i]));
    let u = DVector::from_fn(k, |i, _| scale_bound(prob.u[i], e[i]));
    Scaled { p, q, a, l, u, d, e, c }
}

fn clamp_vec(v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].max(l[i]).min(u[i]))
}

struct Residuals {
    prim: f64,
    dual: f64,
    eps_prim: f64,
    eps_dual: f64,
    /// `max(|Ax|, |z|)` and `max(|Px|, |A^T y|, |q|)`, unscaled.
    prim_scale: f64,
    dual_scale: f64,
}

fn residuals(
    s: &Scaled,
    x: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
    eps_abs: f64,
    eps_rel: f64,
) -> Residuals {
    let ax = &s.a * x;
    let prim_vec = (&ax - z).component_div(&s.e);
    let px = &s.p * x;
    let aty = s.a.transpose() * y;
    let dual_vec = (&px + &s.q + &aty).component_div(&s.d) / s.c;
    let amax = |v: &DVector<f64>| if v.is_empty() { 0.0 } else { v.amax() };
    let prim_scale = amax(&ax.component_div(&s.e)).max(amax(&z.component_div(&s.e)));
    let dual_scale = amax(&px.component_div(&s.d))
        .max(amax(&aty.component_div(&s.d)))
        .max(amax(&s.q.component_div(&s.d)))
        / s.c;
    Residuals {
        prim: amax(&prim_vec),
        dual: amax(&dual_vec),
        eps_prim: eps_abs + eps_rel * prim_scale,
        eps_dual: eps_abs + eps_rel * dual_scale,
        prim_scale,
        dual_scale,
    }
}

/// Primal infeasibility certificate on the scaled problem.
fn primal_infeasible(s: &Scaled, dy: &DVector<f64>, eps: f64) -> bool {
    let norm_dy = dy.component_mul(&s.e).amax();
    if norm_dy <= 1e-12 {
        return false;
    }
    let at_dy = (s.a.transpose() * dy).component_div(&s.d).amax();
    if at_dy > eps * norm_dy {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        let v = dy[i];
        if v > 0.0 {
            if s.u[i] >= INF_BOUND {
                return false;
            }
            support += s.u[i] * v;
        } else if v < 0.0 {
            if s.l[i] <= -INF_BOUND {
                return false;
            }
            support += s.l[i] * v;
        }
    }
    support < -eps * norm_dy
}

/// Solves the equality-constrained QP on a guessed active set.
fn polish(prob: &QpProblem, x: &DVector<f64>, y: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = prob.n();
    let ax = &prob.a * x;
    let mut active = Vec::new();
    let mut rhs_b = Vec::new();
    for i in 0..prob.k() {
        let lo_gap = ax[i] - prob.l[i];
        let hi_gap = prob.u[i] - ax[i];
        if prob.l[i] > -INF_BOUND && lo_gap < -y[i] {
            active.push(i);
            rhs_b.push(prob.l[i]);
        } else if prob.u[i] < INF_BOUND && hi_gap < y[i] {
            active.push(i);
            rhs_b.push(prob.u[i]);
        }
    }
    let na = active.len();
    let reg = 1e-9;
    let dim = n + na;
    let mut kkt = DMatrix::zeros(dim, dim);
    let mut exact = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&prob.p);
    for (r, &i) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = prob.a[(i, j)];
            kkt[(j, n + r)] = prob.a[(i, j)];
        }
    }
    exact.copy_from(&kkt);
    for i in 0..n {
        kkt[(i, i)] += reg;
    }
    for r in 0..na {
        kkt[(n + r, n + r)] -= reg;
    }
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-&prob.q));
    for (r, &b) in rhs_b.iter().enumerate() {
        rhs[n + r] = b;
    }
    let lu = kkt.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..5 {
        let res = &rhs - &exact * &sol;
        let corr = lu.solve(&res)?;
        sol += corr;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let xp = sol.rows(0, n).into_owned();
    let mut yp = DVector::zeros(prob.k());
    for (r, &i) in active.iter().enumerate() {
        yp[i] = sol[n + r];
    }
    Some((xp, yp))
}

fn unscaled_residuals(prob: &QpProblem, x: &DVector<f64>, y: &DVector<f64>) -> (f64, f64) {
    let amax = |v: &DVector<f64>| if v.is_empty() { 0.0 } else { v.amax() };
    let ax = &prob.a * x;
    let viol = DVector::from_fn(prob.k(), |i, _| {
        (prob.l[i] - ax[i]).max(ax[i] - prob.u[i]).max(0.0)
    });
    let dual = &prob.p * x + &prob.q + prob.a.transpose() * y;
    (amax(&viol), amax(&dual))
}

fn multipliers_consistent(prob: &QpProblem, x: &DVector<f64>, y: &DVector<f64>, tol: f64) -> bool {
    let ax = &prob.a * x;
    (0..prob.k()).all(|i| {
        let at_lower = (ax[i] - prob.l[i]).abs() <= tol * (1.0 + prob.l[i].abs());
        let at_upper = (prob.u[i] - ax[i]).abs() <= tol * (1.0 + prob.u[i].abs());
        match (at_lower, at_upper) {
            (true, true) => true,
            (true, false) => y[i] <= tol,
            (false, true) => y[i] >= -tol,
            (false, false) => y[i].abs() <= tol,
        }
    })
}

pub fn solve_with(prob: &QpProblem, settings: &QpSettings) -> QpSolution {
    let n = prob.n();
    let k = prob.k();

    if k == 0 {
        if let Some(chol) = prob.p.clone().cholesky() {
            let x = chol.solve(&(-&prob.q));
            let dual = (&prob.p * &x + &prob.q).amax();
            return QpSolution {
                objective: prob.objective(&x),
                x,
                y: DVector::zeros(0),
                status: QpStatus::Optimal,
                primal_residual: 0.0,
                dual_residual: dual,
                iterations: 0,
                polished: false,
                merit_history: Vec::new(),
            };
        }
    }

    let s = equilibrate(prob, settings.scaling_passes);
    let mut rho = settings.rho;
    let sigma = settings.sigma;
    let alpha = settings.alpha;
    let ata = s.a.transpose() * &s.a;
    let factor = |rho: f64| -> Option<Cholesky<f64, Dyn>> {
        let mut kkt = &s.p + DMatrix::identity(n, n) * sigma + &ata * rho;
        linalg::symmetrize(&mut kkt);
        kkt.cholesky()
    };
    let mut chol = match factor(rho) {
        Some(c) => c,
        None => {
            // sigma > 0 keeps this PD; reaching here means non-finite data
            return QpSolution {
                x: DVector::zeros(n),
                y: DVector::zeros(k),
                objective: f64::NAN,
                status: QpStatus::MaxIter,
                primal_residual: f64::INFINITY,
                dual_residual: f64::INFINITY,
                iterations: 0,
                polished: false,
                merit_history: Vec::new(),
            };
        }
    };

    let mut x = DVector::zeros(n);
    let mut z = DVector::zeros(k);
    let mut y = DVector::zeros(k);
    let mut merit_history = Vec::new();
    let mut status = QpStatus::MaxIter;
    let mut iterations = settings.max_iter;
    let at = s.a.transpose();

    for iter in 1..=settings.max_iter {
        let rhs = &x * sigma - &s.q + &at * (&z * rho - &y);
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &s.a * &x_tilde;
        let x_next = &x_tilde * alpha + &x * (1.0 - alpha);
        let z_relaxed = &z_tilde * alpha + &z * (1.0 - alpha);
        let s_next = &z_relaxed + &y / rho;
        let z_next = clamp_vec(&s_next, &s.l, &s.u);
        let y_next = &y + (&z_relaxed - &z_next) * rho;

        if settings.merit_every > 0 && iter % settings.merit_every == 0 {
            let s_prev = &z + &y / rho;
            let dx = (&x_next - &x).norm_squared();
            let ds = (&s_next - &s_prev).norm_squared();
            merit_history.push((sigma * dx + rho * ds).sqrt());
        }

        let dy = &y_next - &y;
        x = x_next;
        z = z_next;
        y = y_next;

        let r = residuals(&s, &x, &z, &y, settings.eps_abs, settings.eps_rel);
        if r.prim <= r.eps_prim && r.dual <= r.eps_dual {
            status = QpStatus::Optimal;
            iterations = iter;
            break;
        }
        if settings.adaptive_rho_interval > 0 && iter % settings.adaptive_rho_interval == 0 {
            let num = r.prim / r.prim_scale.max(1e-30);
            let den = r.dual / r.dual_scale.max(1e-30);
            if num > 0.0 && den > 0.0 {
                let est = (rho * (num / den).sqrt()).clamp(1e-6, 1e6);
                let tol = settings.adaptive_rho_tolerance;
                if est > rho * tol || est < rho / tol {
                    if let Some(c) = factor(est) {
                        chol = c;
                        rho = est;
                    }
                }
            }
        }
        if iter >= settings.infeasibility_after
            && iter % 10 == 0
            && primal_infeasible(&s, &dy, settings.eps_prim_inf)
        {
            status = QpStatus::Infeasible;
            iterations = iter;
            break;
        }
    }

    let mut x_out = x.component_mul(&s.d);
    let mut y_out = y.component_mul(&s.e) / s.c;
    let (mut prim, mut dual) = unscaled_residuals(prob, &x_out, &y_out);
    let mut polished = false;

    if settings.polish && status != QpStatus::Infeasible {
        if let Some((xp, yp)) = polish(prob, &x_out, &y_out) {
            let (pp, pd) = unscaled_residuals(prob, &xp, &yp);
            let tol_p = settings.eps_abs.max(prim);
            let tol_d = settings.eps_abs.max(dual);
            if pp <= tol_p
                && pd <= tol_d
                && multipliers_consistent(prob, &xp, &yp, 1e-7)
            {
                x_out = xp;
                y_out = yp;
                prim = pp;
                dual = pd;
                polished = true;
                status = QpStatus::Optimal;
            }
        }
    }

    QpSolution {
        objective: prob.objective(&x_out),
        x: x_out,
        y: y_out,
        status,
        primal_residual: prim,
        dual_residual: dual,
        iterations,
        polished,
        merit_history,
    }
}

/// Per-channel box `lower <= v <= upper`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ChannelBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self { lower, upper }
    }

    pub fn symmetric(bound: f64, channels: usize) -> Self {
        Self { lower: vec![-bound; channels], upper: vec![bound; channels] }
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        v.iter()
            .enumerate()
            .all(|(i, &x)| x >= self.lower[i] - tol && x <= self.upper[i] + tol)
    }
}

/// Linear inequality rows on a stacked trajectory in `[w_ini; w_f]` order.
#[derive(Clone, Debug)]
pub struct TrajectoryBox {
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl TrajectoryBox {
    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    /// Composes with a linear parameterisation `w = M z`.
    pub fn compose(&self, m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        (&self.a * m, self.l.clone(), self.u.clone())
    }
}

/// Box constraints on the future inputs and outputs of a trajectory in
/// `[u_ini; y_ini; u_f; y_f]` order. `w_ini` entries are left free.
pub fn assemble_box_on_trajectory(
    sig: Signature,
    t_ini: usize,
    t_f: usize,
    u_box: Option<&ChannelBox>,
    y_box: Option<&ChannelBox>,
) -> Result<TrajectoryBox> {
    if t_ini + t_f != sig.l {
        return Err(Error::Dimension(format!("T_ini + T_f = {} but L = {}", t_ini + t_f, sig.l)));
    }
    let Signature { m, p, .. } = sig;
    let ini = sig.q() * t_ini;
    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    for (bx, channels, offset, name) in [(u_box, m, ini, "input"), (y_box, p, ini + m * t_f, "output")] {
        let Some(bx) = bx else { continue };
        if bx.lower.len() != channels || bx.upper.len() != channels {
            return Err(Error::Dimension(format!(
                "{name} box has {}/{} bounds for {channels} channels",
                bx.lower.len(),
                bx.upper.len()
            )));
        }
        for c in 0..channels {
            if !(bx.lower[c] <= bx.upper[c]) {
                return Err(Error::Bounds(format!(
                    "{name} channel {c}: lower {} > upper {}",
                    bx.lower[c], bx.upper[c]
                )));
            }
        }
        for kstep in 0..t_f {
            for c in 0..channels {
                rows.push((offset + kstep * channels + c, bx.lower[c], bx.upper[c]));
            }
        }
    }
    let mut a = DMatrix::zeros(rows.len(), sig.len());
    let mut l = DVector::zeros(rows.len());
    let mut u = DVector::zeros(rows.len());
    for (r, &(col, lo, hi)) in rows.iter().enumerate() {
        a[(r, col)] = 1.0;
        l[r] = lo;
        u[r] = hi;
    }
    Ok(TrajectoryBox { a, l, u })
}
