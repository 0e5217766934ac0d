use nalgebra::{DMatrix, DVector, SVD};

use super::{ControlSolution, ControlTarget, ControlWeights, Layout, Method, MethodConfig};
use crate::behavior::{weighted_projector, DataMatrix, Subspace};
use crate::error::{Error, Result};
use crate::linalg;
use crate::qp::{self, QpProblem, QpSettings, QpStatus, TrajectoryBox};
use crate::soft_projection::SoftProjector;

/// `(w - t)^T W (w - t)`.
pub fn weighted_objective(w: &DVector<f64>, weight: &DMatrix<f64>, target: &DVector<f64>) -> f64 {
    let r = w - target;
    r.dot(&(weight * &r))
}

/// Thin factorisation of the permuted data matrix used by the DeePC solvers.
///
/// Minimisers of the DeePC cost lie in the row space of `H` for both
/// regularisers, so `g = V z` with `H V = U Sigma` reduces the decision
/// variable from `D` to `rank(H)`.
#[derive(Clone, Debug)]
pub struct DeepcData {
    /// Permuted data matrix, `qL x D`.
    pub hp: DMatrix<f64>,
    /// `U Sigma`, `qL x r`.
    pub us: DMatrix<f64>,
    /// Right singular vectors, `D x r`.
    pub v: DMatrix<f64>,
    /// Orthonormal basis of the row space of `[Z_p; U_f]`, `D x r2`.
    pub v_pi: DMatrix<f64>,
}

impl DeepcData {
    pub fn new(data: &DataMatrix) -> Result<Self> {
        let hp = data.permuted();
        let (us, v) = thin_factor(&hp)?;
        let (_, v_pi) = thin_factor(&data.zp_uf())?;
        Ok(Self { hp, us, v, v_pi })
    }

    pub fn rank(&self) -> usize {
        self.v.ncols()
    }

    pub fn ncols(&self) -> usize {
        self.hp.ncols()
    }

    /// `V^T (I - Pi) V`.
    fn projected_reg(&self) -> DMatrix<f64> {
        let c = self.v.transpose() * &self.v_pi;
        let r = self.rank();
        let mut m = DMatrix::identity(r, r) - &c * c.transpose();
        linalg::symmetrize(&mut m);
        m
    }

    /// `||(I - Pi) g||^2`.
    pub fn projected_norm_sq(&self, g: &DVector<f64>) -> f64 {
        let c = self.v_pi.transpose() * g;
        (g.norm_squared() - c.norm_squared()).max(0.0)
    }
}

/// Returns `(U Sigma, V)` truncated at numerical rank.
fn thin_factor(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let svd = SVD::new(m.clone(), true, true);
    let u = svd.u.as_ref().expect("left vectors requested");
    let v_t = svd.v_t.as_ref().expect("right vectors requested");
    let smax = svd.singular_values.max();
    if smax <= 0.0 {
        return Err(Error::Rank("data matrix is zero".into()));
    }
    let tol = linalg::rank_tolerance(m.nrows(), m.ncols(), smax);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > tol)
        .collect();
    let mut us = DMatrix::zeros(m.nrows(), keep.len());
    let mut v = DMatrix::zeros(m.ncols(), keep.len());
    for (dst, &i) in keep.iter().enumerate() {
        us.set_column(dst, &(u.column(i) * svd.singular_values[i]));
        v.set_column(dst, &v_t.row(i).transpose());
    }
    Ok((us, v))
}

/// DeePC cost `||H g - t||_W^2 + lambda_g R(g)`.
pub fn deepc_objective(
    data: &DeepcData,
    weight: &DMatrix<f64>,
    target: &DVector<f64>,
    g: &DVector<f64>,
    lambda_g: f64,
    projected: bool,
) -> f64 {
    let reg = if projected { data.projected_norm_sq(g) } else { g.norm_squared() };
    weighted_objective(&(&data.hp * g), weight, target) + lambda_g * reg
}

/// Literal `D x D` solution `g = (H^T W H + lambda I)^{-1} H^T W t`,
/// returning `(H g, g)`.
pub fn deepc_closed_form(
    hp: &DMatrix<f64>,
    weight: &DMatrix<f64>,
    target: &DVector<f64>,
    lambda_g: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let d = hp.ncols();
    let mut normal = hp.transpose() * weight * hp + DMatrix::identity(d, d) * lambda_g;
    linalg::symmetrize(&mut normal);
    let rhs = hp.transpose() * (weight * target);
    let g = normal
        .cholesky()
        .ok_or_else(|| Error::Conditioning(format!("DeePC normal matrix singular at lambda_g = {lambda_g}")))?
        .solve(&rhs);
    Ok((hp * &g, g))
}

fn check_target(weights: &ControlWeights, target: &ControlTarget) -> Result<DVector<f64>> {
    let t = target.stacked();
    if t.len() != weights.w.nrows() {
        return Err(Error::Dimension(format!(
            "target has length {}, weight is {}x{}",
            t.len(),
            weights.w.nrows(),
            weights.w.ncols()
        )));
    }
    Ok(t)
}

/// Minimises `z^T P z / 2 + q^T z` subject to `l <= A z <= u` and returns
/// `z`, iterations and status. Without constraints the Cholesky path is exact.
fn run_qp(
    p: DMatrix<f64>,
    q: DVector<f64>,
    bounds: Option<(DMatrix<f64>, DVector<f64>, DVector<f64>)>,
    settings: &QpSettings,
) -> Result<(DVector<f64>, usize, Option<QpStatus>)> {
    let n = q.len();
    let (a, l, u) = bounds.unwrap_or_else(|| (DMatrix::zeros(0, n), DVector::zeros(0), DVector::zeros(0)));
    if a.nrows() == 0 {
        let z = linalg::spd_solve_vec(&p, &(-&q))?;
        return Ok((z, 0, None));
    }
    // Whitening z = L^{-T} v turns the Hessian into the identity. The
    // weights span many decades, and without it the residual tolerances are
    // dominated by the w_ini block.
    let chol = linalg::symmetrized(&p)
        .cholesky()
        .ok_or_else(|| Error::Definiteness("QP Hessian is not positive definite".into()))?;
    let lower = chol.l();
    let q_w = lower
        .solve_lower_triangular(&q)
        .ok_or_else(|| Error::Conditioning("singular Cholesky factor".into()))?;
    let a_w = lower
        .solve_lower_triangular(&a.transpose())
        .ok_or_else(|| Error::Conditioning("singular Cholesky factor".into()))?
        .transpose();
    let prob = QpProblem::new(DMatrix::identity(n, n), q_w, a_w, l, u)?;
    let sol = qp::solve_with(&prob, settings);
    let z = lower
        .transpose()
        .solve_upper_triangular(&sol.x)
        .ok_or_else(|| Error::Conditioning("singular Cholesky factor".into()))?;
    match sol.status {
        QpStatus::Infeasible => Err(Error::Solver { status: sol.status, iterations: sol.iterations }),
        _ if z.iter().any(|v| !v.is_finite()) => {
            Err(Error::Solver { status: sol.status, iterations: sol.iterations })
        }
        status => Ok((z, sol.iterations, Some(status))),
    }
}

fn composed(bounds: Option<&TrajectoryBox>, m: &DMatrix<f64>) -> Option<(DMatrix<f64>, DVector<f64>, DVector<f64>)> {
    bounds.filter(|b| b.rows() > 0).map(|b| b.compose(m))
}

/// Weighted projection of the target onto an exact behavior, optionally
/// restricted to a box.
pub fn solve_true_projection(
    layout: &Layout,
    basis: &Subspace,
    weights: &ControlWeights,
    target: &ControlTarget,
    bounds: Option<&TrajectoryBox>,
    settings: &QpSettings,
) -> Result<ControlSolution> {
    let t = check_target(weights, target)?;
    if basis.ambient() != t.len() {
        return Err(Error::Dimension(format!(
            "basis ambient dimension {} but target length {}",
            basis.ambient(),
            t.len()
        )));
    }
    let w = &weights.w;
    let (w_star, iterations, status) = match composed(bounds, &basis.basis) {
        None => (weighted_projector(basis, w)? * (w * &t), 0, None),
        Some(c) => {
            let b = &basis.basis;
            let mut p = b.transpose() * w * b;
            linalg::symmetrize(&mut p);
            let q = -(b.transpose() * (w * &t));
            let (z, it, st) = run_qp(p, q, Some(c), settings)?;
            (b * z, it, st)
        }
    };
    let objective = weighted_objective(&w_star, w, &t);
    Ok(ControlSolution::assemble(layout, target, w_star, None, objective, iterations, status))
}

/// DeePC with 2-norm (`projected = false`) or projected regularisation.
pub fn solve_deepc(
    layout: &Layout,
    data: &DeepcData,
    weights: &ControlWeights,
    target: &ControlTarget,
    lambda_g: f64,
    projected: bool,
    bounds: Option<&TrajectoryBox>,
    settings: &QpSettings,
) -> Result<ControlSolution> {
    if !(lambda_g >= 0.0) || (!projected && lambda_g == 0.0 && data.rank() < data.ncols()) {
        return Err(Error::Conditioning(format!(
            "lambda_g = {lambda_g} leaves the DeePC problem without a unique solution"
        )));
    }
    let (w_star, g, iterations, status) =
        solve_deepc_reduced(data, weights, target, lambda_g, projected, bounds, settings)?;
    let t = target.stacked();
    let objective = deepc_objective(data, &weights.w, &t, &g, lambda_g, projected);
    Ok(ControlSolution::assemble(layout, target, w_star, Some(g), objective, iterations, status))
}

/// Solves the reduced problem in `z`; returns `(H g, g, iterations, status)`.
pub fn solve_deepc_reduced(
    data: &DeepcData,
    weights: &ControlWeights,
    target: &ControlTarget,
    lambda_g: f64,
    projected: bool,
    bounds: Option<&TrajectoryBox>,
    settings: &QpSettings,
) -> Result<(DVector<f64>, DVector<f64>, usize, Option<QpStatus>)> {
    let t = check_target(weights, target)?;
    if data.hp.nrows() != t.len() {
        return Err(Error::Dimension(format!(
            "data matrix has {} rows, target length {}",
            data.hp.nrows(),
            t.len()
        )));
    }
    let w = &weights.w;
    let us = &data.us;
    let r = data.rank();
    let reg = if projected { data.projected_reg() } else { DMatrix::identity(r, r) };
    let mut p = us.transpose() * w * us + reg * lambda_g;
    linalg::symmetrize(&mut p);
    let q = -(us.transpose() * (w * &t));
    let (z, iterations, status) = run_qp(p, q, composed(bounds, us), settings)?;
    Ok((us * &z, &data.v * z, iterations, status))
}

fn soft_problem(
    layout: &Layout,
    penalty: DMatrix<f64>,
    weights: &ControlWeights,
    target: &ControlTarget,
    bounds: Option<&TrajectoryBox>,
    settings: &QpSettings,
) -> Result<ControlSolution> {
    let t = check_target(weights, target)?;
    if penalty.nrows() != t.len() {
        return Err(Error::Dimension(format!(
            "projector is {}x{}, target length {}",
            penalty.nrows(),
            penalty.ncols(),
            t.len()
        )));
    }
    let w = &weights.w;
    let mut p = w + &penalty;
    linalg::symmetrize(&mut p);
    let q = -(w * &t);
    let n = t.len();
    let (w_star, iterations, status) = run_qp(p, q, composed(bounds, &DMatrix::identity(n, n)), settings)?;
    let objective = weighted_objective(&w_star, w, &t) + w_star.dot(&(&penalty * &w_star));
    Ok(ControlSolution::assemble(layout, target, w_star, None, objective, iterations, status))
}

/// `alpha (I - P)^T (I - P)`; idempotence is not assumed.
fn squared_penalty(proj: &SoftProjector, alpha: f64) -> DMatrix<f64> {
    let c = proj.complement();
    let mut k = c.transpose() * &c * alpha;
    linalg::symmetrize(&mut k);
    k
}

/// `alpha_hat / delta (I - P)`.
fn quadratic_penalty(proj: &SoftProjector, alpha_hat: f64) -> DMatrix<f64> {
    proj.complement() * (alpha_hat / proj.delta)
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must be non-negative, got {v}")))
    }
}

/// Minimises `||w - t||_W^2 + alpha ||(I - P) w||^2`.
pub fn solve_soft_squared(
    layout: &Layout,
    proj: &SoftProjector,
    weights: &ControlWeights,
    target: &ControlTarget,
    alpha: f64,
    bounds: Option<&TrajectoryBox>,
    settings: &QpSettings,
) -> Result<ControlSolution> {
    check_nonneg("alpha", alpha)?;
    soft_problem(layout, squared_penalty(proj, alpha), weights, target, bounds, settings)
}

/// Minimises `||w - t||_W^2 + alpha_hat / delta * w^T (I - P) w`.
pub fn solve_soft_quadratic(
    layout: &Layout,
    proj: &SoftProjector,
    weights: &ControlWeights,
    target: &ControlTarget,
    alpha_hat: f64,
    bounds: Option<&TrajectoryBox>,
    settings: &QpSettings,
) -> Result<ControlSolution> {
    check_nonneg("alpha_hat", alpha_hat)?;
    soft_problem(layout, quadratic_penalty(proj, alpha_hat), weights, target, bounds, settings)
}

/// Unconstrained solution map `(W + alpha (I-P)^T (I-P))^{-1} W`.
pub fn soft_squared_map(proj: &SoftProjector, w: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
    linalg::spd_solve(&linalg::symmetrized(&(w + squared_penalty(proj, alpha))), w)
}

/// Unconstrained solution map `(W + alpha_hat / delta (I - P))^{-1} W`.
pub fn soft_quadratic_map(proj: &SoftProjector, w: &DMatrix<f64>, alpha_hat: f64) -> Result<DMatrix<f64>> {
    linalg::spd_solve(&linalg::symmetrized(&(w + quadratic_penalty(proj, alpha_hat))), w)
}

/// Model object a controller plans with.
#[derive(Clone, Debug)]
pub enum ControllerModel {
    /// Orthonormal basis of the exact behavior, rows in control order.
    Behavior(Subspace),
    Deepc(DeepcData),
    /// Unweighted soft projector for the penalised formulations.
    Soft(SoftProjector),
    /// Weighted soft projector `P` used as the explicit map `w = P W t`.
    ExplicitDeepc(SoftProjector),
}

/// A configured method with its model, weights and constraints.
#[derive(Clone, Debug)]
pub struct Controller {
    pub layout: Layout,
    pub weights: ControlWeights,
    pub config: MethodConfig,
    pub model: ControllerModel,
    pub bounds: Option<TrajectoryBox>,
    pub settings: QpSettings,
}

impl Controller {
    pub fn new(
        layout: Layout,
        weights: ControlWeights,
        config: MethodConfig,
        model: ControllerModel,
        bounds: Option<TrajectoryBox>,
    ) -> Result<Self> {
        config.validate()?;
        let ok = matches!(
            (&model, config.method),
            (ControllerModel::Behavior(_), Method::TrueProjection)
                | (ControllerModel::Deepc(_), Method::DeepcL2 | Method::DeepcProjected)
                | (ControllerModel::Soft(_), Method::SoftSquared | Method::SoftQuadratic)
                | (ControllerModel::ExplicitDeepc(_), Method::DeepcL2)
        );
        if !ok {
            return Err(Error::Parameter(format!("model object does not fit method {}", config.method)));
        }
        if matches!(model, ControllerModel::ExplicitDeepc(_)) && bounds.as_ref().is_some_and(|b| b.rows() > 0) {
            return Err(Error::Parameter("the explicit DeePC map cannot enforce constraints".into()));
        }
        Ok(Self { layout, weights, config, model, bounds, settings: QpSettings::default() })
    }

    /// Builds the model object for `config.method` from a data matrix.
    /// For the soft methods the projector is the unweighted one.
    pub fn from_data(
        layout: Layout,
        weights: ControlWeights,
        config: MethodConfig,
        data: &DataMatrix,
        bounds: Option<TrajectoryBox>,
    ) -> Result<Self> {
        config.validate()?;
        if data.sig != layout.sig || data.t_ini != layout.t_ini {
            return Err(Error::Dimension("data matrix layout differs from controller layout".into()));
        }
        let model = match config.method {
            Method::TrueProjection => {
                return Err(Error::Parameter("the exact projection needs a behavior basis".into()))
            }
            Method::DeepcL2 | Method::DeepcProjected => ControllerModel::Deepc(DeepcData::new(data)?),
            Method::SoftSquared | Method::SoftQuadratic => {
                let n = layout.len();
                ControllerModel::Soft(crate::soft_projection::soft_projector(
                    &data.permuted(),
                    &DMatrix::identity(n, n),
                    config.delta,
                )?)
            }
        };
        Self::new(layout, weights, config, model, bounds)
    }

    pub fn with_settings(mut self, settings: QpSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn solve(&self, target: &ControlTarget) -> Result<ControlSolution> {
        let (l, w, b, s) = (&self.layout, &self.weights, self.bounds.as_ref(), &self.settings);
        let c = &self.config;
        match &self.model {
            ControllerModel::Behavior(basis) => solve_true_projection(l, basis, w, target, b, s),
            ControllerModel::Deepc(data) => {
                solve_deepc(l, data, w, target, c.lambda_g, c.method == Method::DeepcProjected, b, s)
            }
            ControllerModel::Soft(p) if c.method == Method::SoftSquared => {
                solve_soft_squared(l, p, w, target, c.alpha, b, s)
            }
            ControllerModel::Soft(p) => solve_soft_quadratic(l, p, w, target, c.alpha_hat, b, s),
            ControllerModel::ExplicitDeepc(p) => {
                let t = check_target(w, target)?;
                let w_star = &p.p * (&w.w * &t);
                let objective = weighted_objective(&w_star, &w.w, &t);
                Ok(ControlSolution::assemble(l, target, w_star, None, objective, 0, None))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::{behavior_basis, build_data_matrix};
    use crate::plant::case_study_plant;
    use crate::qp::{assemble_box_on_trajectory, ChannelBox};
    use crate::soft_projection::{soft_projector, soft_projector_direct};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn small_layout() -> Layout {
        Layout::new(1, 1, 2, 3).unwrap()
    }

    fn target_for(layout: &Layout, rng: &mut ChaCha8Rng) -> ControlTarget {
        let n = layout.len();
        let ini = layout.ini_len();
        let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        ControlTarget::new(layout, v.rows(0, ini).into_owned(), v.rows(ini, n - ini).into_owned()).unwrap()
    }

    fn data_for(layout: &Layout, rng: &mut ChaCha8Rng, d: usize) -> DataMatrix {
        let h = random(rng, layout.len(), d);
        DataMatrix::from_raw(layout.sig, h, layout.t_ini, layout.t_f).unwrap()
    }

    #[test]
    fn unit_deepc_example() {
        // H = I, W = I, lambda = 1 gives half the target.
        let t = DVector::from_row_slice(&[1.0, -2.0, 3.0]);
        let (w, g) = deepc_closed_form(&DMatrix::identity(3, 3), &DMatrix::identity(3, 3), &t, 1.0).unwrap();
        assert!((w - &t / 2.0).norm() < 1e-14);
        assert!((g - &t / 2.0).norm() < 1e-14);
    }

    #[test]
    fn reduced_deepc_matches_literal_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = small_layout();
        let weights = ControlWeights::diagonal(1.0, 0.1, 10.0, &layout).unwrap();
        for d in [4, 10, 30] {
            let data = data_for(&layout, &mut rng, d);
            let dd = DeepcData::new(&data).unwrap();
            let target = target_for(&layout, &mut rng);
            let sol = solve_deepc(&layout, &dd, &weights, &target, 0.7, false, None, &QpSettings::default()).unwrap();
            let (w_ref, g_ref) = deepc_closed_form(&dd.hp, &weights.w, &target.stacked(), 0.7).unwrap();
            assert!((&sol.w_star - &w_ref).norm() <= 1e-9 * w_ref.norm().max(1.0));
            assert!((sol.g_star.unwrap() - &g_ref).norm() <= 1e-9 * (1.0 + g_ref.norm()));
        }
    }

    #[test]
    fn remark_identity_on_one_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layout = small_layout();
        let weights = ControlWeights::diagonal(2.0, 0.5, 5.0, &layout).unwrap();
        let data = data_for(&layout, &mut rng, 20);
        let target = target_for(&layout, &mut rng);
        let t = target.stacked();
        let (w_ref, _) = deepc_closed_form(&data.permuted(), &weights.w, &t, 0.3).unwrap();
        let proj = soft_projector_direct(&data.permuted(), &weights.w, 0.3).unwrap();
        let via_proj = &proj.p * (&weights.w * &t);
        assert!((w_ref - via_proj).norm() < 1e-10);
    }

    #[test]
    fn projected_regularizer_matches_literal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layout = small_layout();
        let weights = ControlWeights::diagonal(1.0, 0.1, 3.0, &layout).unwrap();
        let data = data_for(&layout, &mut rng, 12);
        let dd = DeepcData::new(&data).unwrap();
        let target = target_for(&layout, &mut rng);
        let t = target.stacked();
        let lambda = 0.4;
        let sol = solve_deepc(&layout, &dd, &weights, &target, lambda, true, None, &QpSettings::default()).unwrap();
        let pi = crate::soft_projection::regularizer_pi(&data);
        let hp = data.permuted();
        let d = hp.ncols();
        let normal = hp.transpose() * &weights.w * &hp + (DMatrix::identity(d, d) - pi) * lambda;
        let g = normal.lu().solve(&(hp.transpose() * (&weights.w * &t))).unwrap();
        let w_ref = &hp * &g;
        assert!((&sol.w_star - &w_ref).norm() < 1e-8 * w_ref.norm());
        let obj_ref = deepc_objective(&dd, &weights.w, &t, &g, lambda, true);
        assert!((sol.objective - obj_ref).abs() < 1e-8 * obj_ref.abs());
    }

    #[test]
    fn zero_penalty_returns_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = small_layout();
        let weights = ControlWeights::diagonal(1.0, 1.0, 1.0, &layout).unwrap();
        let data = data_for(&layout, &mut rng, 8);
        let proj = soft_projector(&data.permuted(), &DMatrix::identity(layout.len(), layout.len()), 1.0).unwrap();
        let target = target_for(&layout, &mut rng);
        let s = QpSettings::default();
        let a = solve_soft_squared(&layout, &proj, &weights, &target, 0.0, None, &s).unwrap();
        let b = solve_soft_quadratic(&layout, &proj, &weights, &target, 0.0, None, &s).unwrap();
        assert!((a.w_star - target.stacked()).norm() < 1e-12);
        assert!((b.w_star - target.stacked()).norm() < 1e-12);
    }

    #[test]
    fn full_space_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layout = small_layout();
        let n = layout.len();
        let weights = ControlWeights::diagonal(1.0, 0.3, 7.0, &layout).unwrap();
        let basis = Subspace::new(DMatrix::identity(n, n)).unwrap();
        let target = target_for(&layout, &mut rng);
        let sol = solve_true_projection(&layout, &basis, &weights, &target, None, &QpSettings::default()).unwrap();
        assert!((sol.w_star - target.stacked()).norm() < 1e-12);
        assert!(sol.objective.abs() < 1e-20);
    }

    fn case_layout() -> (Layout, Subspace) {
        let plant = case_study_plant();
        let layout = Layout::new(1, 2, 2, 12).unwrap();
        let raw = behavior_basis(&plant.a, &plant.b, &plant.c, 14).unwrap();
        (layout, raw.permute_rows(&layout.perm()))
    }

    #[test]
    fn true_projection_qp_matches_closed_form_without_active_box() {
        let (layout, basis) = case_layout();
        let weights = ControlWeights::diagonal(1.0, 0.01, 1e6, &layout).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = DVector::from_fn(basis.dim(), |_, _| rng.random_range(-0.05..0.05));
        let inside = &basis.basis * z;
        let ini = layout.ini_len();
        let noisy = DVector::from_fn(layout.len(), |i, _| inside[i] + 0.01 * rng.random_range(-1.0..1.0));
        let target = ControlTarget::new(&layout, noisy.rows(0, ini).into_owned(), noisy.rows(ini, layout.len() - ini).into_owned()).unwrap();
        let s = QpSettings::default();
        let free = solve_true_projection(&layout, &basis, &weights, &target, None, &s).unwrap();
        let wide = assemble_box_on_trajectory(layout.sig, 2, 12, Some(&ChannelBox::symmetric(100.0, 1)), Some(&ChannelBox::symmetric(100.0, 2))).unwrap();
        let boxed = solve_true_projection(&layout, &basis, &weights, &target, Some(&wide), &s).unwrap();
        let rel = (&free.w_star - &boxed.w_star).norm() / free.w_star.norm();
        assert!(rel < 1e-7, "relative gap {rel}");
    }

    #[test]
    fn constrained_solutions_respect_box() {
        let (layout, basis) = case_layout();
        let weights = ControlWeights::diagonal(1.0, 0.01, 1e6, &layout).unwrap();
        let target = ControlTarget::tracking(&layout, DVector::zeros(layout.ini_len()), None, &DVector::from_element(2, 3.0)).unwrap();
        let bx = assemble_box_on_trajectory(layout.sig, 2, 12, Some(&ChannelBox::symmetric(2.0, 1)), Some(&ChannelBox::symmetric(1.0, 2))).unwrap();
        let sol = solve_true_projection(&layout, &basis, &weights, &target, Some(&bx), &QpSettings::default()).unwrap();
        let aw = &bx.a * &sol.w_star;
        for i in 0..aw.len() {
            assert!(aw[i] >= bx.l[i] - 1e-6 && aw[i] <= bx.u[i] + 1e-6);
        }
        // the output bound is active when the reference sits outside it
        assert!(sol.w_star.rows(layout.yf_offset(), 24).amax() > 0.99);
    }

    #[test]
    fn soft_solvers_constrained_match_objective() {
        let (layout, basis) = case_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = &basis.basis * random(&mut rng, basis.dim(), 60) + random(&mut rng, layout.len(), 60) * 0.01;
        let n = layout.len();
        let proj = soft_projector(&h, &DMatrix::identity(n, n), 0.1).unwrap();
        let weights = ControlWeights::diagonal(1.0, 0.01, 1e6, &layout).unwrap();
        let target = ControlTarget::tracking(&layout, DVector::zeros(layout.ini_len()), None, &DVector::from_element(2, 0.8)).unwrap();
        let bx = assemble_box_on_trajectory(layout.sig, 2, 12, Some(&ChannelBox::symmetric(2.0, 1)), Some(&ChannelBox::symmetric(1.0, 2))).unwrap();
        let s = QpSettings::default();
        for sol in [
            solve_soft_squared(&layout, &proj, &weights, &target, 1e6, Some(&bx), &s).unwrap(),
            solve_soft_quadratic(&layout, &proj, &weights, &target, 0.1 * 1e6, Some(&bx), &s).unwrap(),
        ] {
            assert_eq!(sol.status, Some(QpStatus::Optimal));
            assert_eq!(sol.u_apply[0], sol.w_star[layout.uf_offset()]);
            let aw = &bx.a * &sol.w_star;
            assert!(aw.iter().zip(bx.u.iter()).all(|(v, u)| *v <= u + 1e-6));
        }
    }

    #[test]
    fn explicit_map_rejects_box() {
        let layout = small_layout();
        let n = layout.len();
        let weights = ControlWeights::diagonal(1.0, 1.0, 1.0, &layout).unwrap();
        let proj = soft_projector(&DMatrix::identity(n, n), &weights.w, 1.0).unwrap();
        let bx = assemble_box_on_trajectory(layout.sig, 2, 3, Some(&ChannelBox::symmetric(1.0, 1)), None).unwrap();
        let err = Controller::new(layout, weights, MethodConfig::new(Method::DeepcL2), ControllerModel::ExplicitDeepc(proj), Some(bx));
        assert!(matches!(err, Err(Error::Parameter(_))));
    }

    #[test]
    fn noiseless_data_deepc_tracks_behavior() {
        let plant = case_study_plant();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u: Vec<DVector<f64>> = (0..200).map(|_| DVector::from_element(1, rng.random_range(-1.0..1.0))).collect();
        let y = plant.simulate(&DVector::zeros(4), &u).unwrap();
        let data = build_data_matrix(&u, &y, 14, 2, 12).unwrap();
        let dd = DeepcData::new(&data).unwrap();
        assert_eq!(dd.rank(), 18);
    }
}
