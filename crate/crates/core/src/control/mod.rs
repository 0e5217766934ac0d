//! Predictive control on behaviors: the exact weighted projection, DeePC
//! with 2-norm or projected regularisation, and the two soft-projection
//! formulations (squared residual penalty and quadratic-form penalty).
//!
//! All vectors here are stacked trajectories in `[u_ini; y_ini; u_f; y_f]`
//! order. The slack on `w_ini` is folded into the weight `W`, so every
//! method minimises a weighted distance to the target `[w_ini_hat; w_ref]`.

mod closed_loop;
mod solve;

pub use closed_loop::{
    online_control_loop, receding_horizon_step, IoHistory, LogRow, OnlineConfig,
    Reference, RunLog, StepOutcome,
};
pub use solve::{
    deepc_closed_form, deepc_objective, solve_deepc, solve_deepc_reduced, solve_soft_quadratic,
    solve_soft_squared, solve_true_projection, soft_quadratic_map, soft_squared_map,
    weighted_objective, Controller, ControllerModel, DeepcData,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::behavior::{permute_vector, trajectory_permutation, Signature};
use crate::error::{Error, Result};
use crate::linalg;
use crate::qp::QpStatus;

/// Channel counts and the split `L = T_ini + T_f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub sig: Signature,
    pub t_ini: usize,
    pub t_f: usize,
}

impl Layout {
    pub fn new(m: usize, p: usize, t_ini: usize, t_f: usize) -> Result<Self> {
        let sig = Signature::new(m, p, t_ini + t_f)?;
        Ok(Self { sig, t_ini, t_f })
    }

    pub fn len(&self) -> usize {
        self.sig.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sig.is_empty()
    }

    pub fn ini_len(&self) -> usize {
        self.sig.q() * self.t_ini
    }

    pub fn uf_offset(&self) -> usize {
        self.ini_len()
    }

    pub fn yf_offset(&self) -> usize {
        self.ini_len() + self.sig.m * self.t_f
    }

    /// Raw-to-control row permutation.
    pub fn perm(&self) -> Vec<usize> {
        trajectory_permutation(self.sig, self.t_ini)
    }

    /// Stacks samples into control order `[u_ini; y_ini; u_f; y_f]`.
    pub fn stack(&self, u: &[DVector<f64>], y: &[DVector<f64>]) -> Result<DVector<f64>> {
        let traj = crate::behavior::stack_trajectory(u, y)?;
        if traj.sig != self.sig {
            return Err(Error::Dimension(format!(
                "window signature {:?} does not match layout {:?}",
                traj.sig, self.sig
            )));
        }
        Ok(permute_vector(&traj.w, &self.perm()))
    }

    /// `w_ini` block `[u_ini; y_ini]` from the last `T_ini` samples.
    pub fn stack_ini(&self, u: &[DVector<f64>], y: &[DVector<f64>]) -> Result<DVector<f64>> {
        if u.len() != self.t_ini || y.len() != self.t_ini {
            return Err(Error::Dimension(format!(
                "expected {} initial samples, got {} inputs and {} outputs",
                self.t_ini,
                u.len(),
                y.len()
            )));
        }
        let mut w = DVector::zeros(self.ini_len());
        let (m, p) = (self.sig.m, self.sig.p);
        for k in 0..self.t_ini {
            w.rows_mut(k * m, m).copy_from(&u[k]);
            w.rows_mut(m * self.t_ini + k * p, p).copy_from(&y[k]);
        }
        Ok(w)
    }

    pub fn future_inputs(&self, w: &DVector<f64>) -> Vec<DVector<f64>> {
        let m = self.sig.m;
        (0..self.t_f)
            .map(|k| w.rows(self.uf_offset() + k * m, m).into_owned())
            .collect()
    }

    pub fn future_outputs(&self, w: &DVector<f64>) -> Vec<DVector<f64>> {
        let p = self.sig.p;
        (0..self.t_f)
            .map(|k| w.rows(self.yf_offset() + k * p, p).into_owned())
            .collect()
    }

    /// Reference block `[u_ref repeated; y_ref repeated]` for `w_f`.
    pub fn constant_reference(&self, u_ref: &DVector<f64>, y_ref: &DVector<f64>) -> DVector<f64> {
        let us = vec![u_ref.clone(); self.t_f];
        let ys = vec![y_ref.clone(); self.t_f];
        self.reference_from(&us, &ys)
    }

    pub fn reference_from(&self, us: &[DVector<f64>], ys: &[DVector<f64>]) -> DVector<f64> {
        let (m, p) = (self.sig.m, self.sig.p);
        let mut w = DVector::zeros(self.sig.q() * self.t_f);
        for k in 0..self.t_f {
            w.rows_mut(k * m, m).copy_from(&us[k]);
            w.rows_mut(m * self.t_f + k * p, p).copy_from(&ys[k]);
        }
        w
    }
}

/// Output and input weights, slack weight and the assembled `W`.
#[derive(Clone, Debug)]
pub struct ControlWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub lambda_sigma: f64,
    /// `blockdiag(lambda_sigma I, I (x) R, I (x) Q)` in control order.
    pub w: DMatrix<f64>,
}

impl ControlWeights {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, lambda_sigma: f64, layout: &Layout) -> Result<Self> {
        let Signature { m, p, .. } = layout.sig;
        if q.shape() != (p, p) || r.shape() != (m, m) {
            return Err(Error::Dimension(format!(
                "Q is {:?} and R is {:?} for p = {p}, m = {m}",
                q.shape(),
                r.shape()
            )));
        }
        linalg::check_spd(&q, "Q")?;
        linalg::check_spd(&r, "R")?;
        if !(lambda_sigma > 0.0) {
            return Err(Error::Parameter("lambda_sigma must be positive".into()));
        }
        let ini = DMatrix::identity(layout.ini_len(), layout.ini_len()) * lambda_sigma;
        let mut blocks: Vec<&DMatrix<f64>> = vec![&ini];
        blocks.extend(std::iter::repeat_n(&r, layout.t_f));
        blocks.extend(std::iter::repeat_n(&q, layout.t_f));
        let w = linalg::block_diag(&blocks);
        Ok(Self { q, r, lambda_sigma, w })
    }

    /// `Q = I`, `R = r I`.
    pub fn diagonal(q: f64, r: f64, lambda_sigma: f64, layout: &Layout) -> Result<Self> {
        let Signature { m, p, .. } = layout.sig;
        Self::new(DMatrix::identity(p, p) * q, DMatrix::identity(m, m) * r, lambda_sigma, layout)
    }

    /// Tracking cost `sum ||y - y_ref||_Q^2 + ||u - u_ref||_R^2`.
    pub fn tracking_cost(
        &self,
        us: &[DVector<f64>],
        ys: &[DVector<f64>],
        u_ref: &[DVector<f64>],
        y_ref: &[DVector<f64>],
    ) -> f64 {
        let quad = |m: &DMatrix<f64>, v: DVector<f64>| v.dot(&(m * &v));
        us.iter()
            .zip(u_ref)
            .map(|(u, r)| quad(&self.r, u - r))
            .chain(ys.iter().zip(y_ref).map(|(y, r)| quad(&self.q, y - r)))
            .sum()
    }
}

/// Measured initial trajectory and future reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlTarget {
    pub w_ini_hat: DVector<f64>,
    pub w_ref: DVector<f64>,
}

impl ControlTarget {
    pub fn new(layout: &Layout, w_ini_hat: DVector<f64>, w_ref: DVector<f64>) -> Result<Self> {
        if w_ini_hat.len() != layout.ini_len() || w_ref.len() != layout.len() - layout.ini_len() {
            return Err(Error::Dimension(format!(
                "target blocks have lengths {} and {}, layout expects {} and {}",
                w_ini_hat.len(),
                w_ref.len(),
                layout.ini_len(),
                layout.len() - layout.ini_len()
            )));
        }
        Ok(Self { w_ini_hat, w_ref })
    }

    /// Constant reference; `u_ref` defaults to zero.
    pub fn tracking(
        layout: &Layout,
        w_ini_hat: DVector<f64>,
        u_ref: Option<&DVector<f64>>,
        y_ref: &DVector<f64>,
    ) -> Result<Self> {
        let zero = DVector::zeros(layout.sig.m);
        let w_ref = layout.constant_reference(u_ref.unwrap_or(&zero), y_ref);
        Self::new(layout, w_ini_hat, w_ref)
    }

    pub fn stacked(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.w_ini_hat.len() + self.w_ref.len());
        v.rows_mut(0, self.w_ini_hat.len()).copy_from(&self.w_ini_hat);
        v.rows_mut(self.w_ini_hat.len(), self.w_ref.len()).copy_from(&self.w_ref);
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    TrueProjection,
    DeepcL2,
    DeepcProjected,
    /// Squared residual penalty `alpha ||(I - P~) w||^2`.
    SoftSquared,
    /// Quadratic-form penalty `alpha_hat / delta * w^T (I - P~) w`.
    SoftQuadratic,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::TrueProjection => "TRUE_PROJECTION",
            Method::DeepcL2 => "DEEPC_L2",
            Method::DeepcProjected => "DEEPC_PROJECTED",
            Method::SoftSquared => "SOFT_SQUARED",
            Method::SoftQuadratic => "SOFT_QUADRATIC",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        [
            Method::TrueProjection,
            Method::DeepcL2,
            Method::DeepcProjected,
            Method::SoftSquared,
            Method::SoftQuadratic,
        ]
        .into_iter()
        .find(|m| m.name() == norm)
        .ok_or_else(|| Error::Parse(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    pub lambda_g: f64,
    pub delta: f64,
    pub alpha: f64,
    pub alpha_hat: f64,
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        Self { method, lambda_g: 1.0, delta: 1.0, alpha: 1e6, alpha_hat: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Parameter(format!("{name} must be positive for {}", self.method)))
            }
        };
        match self.method {
            Method::TrueProjection => Ok(()),
            Method::DeepcL2 => positive("lambda_g", self.lambda_g),
            Method::DeepcProjected => {
                if self.lambda_g >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::Parameter("lambda_g must be non-negative".into()))
                }
            }
            Method::SoftSquared => {
                positive("delta", self.delta)?;
                positive("alpha", self.alpha)
            }
            Method::SoftQuadratic => {
                positive("delta", self.delta)?;
                positive("alpha_hat", self.alpha_hat)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ControlSolution {
    pub w_star: DVector<f64>,
    pub u_apply: DVector<f64>,
    pub g_star: Option<DVector<f64>>,
    pub objective: f64,
    /// Implied slack `w_ini* - w_ini_hat`.
    pub sigma_star: DVector<f64>,
    pub iterations: usize,
    /// `None` for closed-form solutions.
    pub status: Option<QpStatus>,
}

impl ControlSolution {
    pub(crate) fn assemble(
        layout: &Layout,
        target: &ControlTarget,
        w_star: DVector<f64>,
        g_star: Option<DVector<f64>>,
        objective: f64,
        iterations: usize,
        status: Option<QpStatus>,
    ) -> Self {
        let m = layout.sig.m;
        let u_apply = w_star.rows(layout.uf_offset(), m).into_owned();
        let sigma_star = w_star.rows(0, layout.ini_len()) - &target.w_ini_hat;
        Self { w_star, u_apply, g_star, objective, sigma_star, iterations, status }
    }
}
