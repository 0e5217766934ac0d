//! Rank-one online updates of the weighted soft projector with the
//! trace-proportional regularization schedule `delta_t = eps * tr(H_t H_t^T)`.
//!
//! The rank-one term is exact algebra at a fixed `delta`. Because the
//! schedule moves `delta` every step, the recursion drifts slowly from the
//! batch projector at the current `delta_t`; [`RecursiveState::rebase_delta`]
//! recomputes from the running Gram matrix and is triggered every
//! `rebase_every` updates.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::io;
use crate::linalg;
use crate::soft_projection::{soft_projector_from_gram, SoftProjector};

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_REBASE_EVERY: usize = 100;

#[derive(Clone, Debug)]
pub struct RecursiveState {
    pub projector: SoftProjector,
    pub delta_t: f64,
    pub epsilon: f64,
    pub trace_hht: f64,
    /// Running `H_t H_t^T`, needed to rebase without the raw columns.
    pub gram: DMatrix<f64>,
    pub t: usize,
    /// Rebase period; `None` disables periodic rebasing.
    pub rebase_every: Option<usize>,
    /// Holds `delta` fixed at its initial value while columns keep arriving.
    pub frozen_schedule: bool,
    since_rebase: usize,
}

/// Scalars produced by one update.
#[derive(Clone, Copy, Debug)]
pub struct UpdateInfo {
    pub gamma: f64,
    pub residual_norm: f64,
    pub rebased: bool,
}

impl RecursiveState {
    /// Batch initialisation from the data columns (rows in control order).
    pub fn init(h: &DMatrix<f64>, w: &DMatrix<f64>, epsilon: f64) -> Result<Self> {
        if h.ncols() == 0 {
            return Err(Error::InsufficientData("initial data matrix has no columns".into()));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
        }
        let gram = h * h.transpose();
        let trace_hht = gram.trace();
        if trace_hht <= 0.0 {
            return Err(Error::InsufficientData("initial data has zero energy".into()));
        }
        let delta_t = epsilon * trace_hht;
        let projector = soft_projector_from_gram(&gram, w, delta_t)?;
        Ok(Self {
            projector,
            delta_t,
            epsilon,
            trace_hht,
            gram,
            t: 0,
            rebase_every: Some(DEFAULT_REBASE_EVERY),
            frozen_schedule: false,
            since_rebase: 0,
        })
    }

    pub fn with_rebase_every(mut self, k: Option<usize>) -> Self {
        self.rebase_every = k.filter(|&k| k > 0);
        self
    }

    pub fn with_frozen_schedule(mut self, frozen: bool) -> Self {
        self.frozen_schedule = frozen;
        self
    }

    pub fn dim(&self) -> usize {
        self.projector.dim()
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.projector.p
    }

    /// Adds one data column via a Sherman-Morrison step.
    pub fn update(&mut self, w_new: &DVector<f64>) -> Result<UpdateInfo> {
        let n = self.dim();
        if w_new.len() != n {
            return Err(Error::Dimension(format!(
                "new trajectory has length {}, projector is {n}x{n}",
                w_new.len()
            )));
        }
        let delta = self.delta_t;
        let ww = &self.projector.w * w_new;
        let residual = w_new - &self.projector.p * &ww;
        let gamma = 1.0 + residual.dot(&ww) / delta;
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::NumericalIntegrity(format!(
                "rank-one normaliser gamma = {gamma} at step {}",
                self.t
            )));
        }
        let scale = 1.0 / (gamma * delta);
        let outer = &residual * residual.transpose() * scale;
        self.projector.p += &outer;
        self.projector.gram_inv_cache -= &outer;
        linalg::symmetrize(&mut self.projector.p);
        linalg::symmetrize(&mut self.projector.gram_inv_cache);
        self.projector.delta = delta;

        let energy = w_new.norm_squared();
        self.gram += w_new * w_new.transpose();
        self.trace_hht += energy;
        if !self.frozen_schedule {
            self.delta_t += self.epsilon * energy;
        }
        self.t += 1;
        self.since_rebase += 1;

        let rebased = match self.rebase_every {
            Some(k) if self.since_rebase >= k => {
                self.rebase_delta()?;
                true
            }
            _ => false,
        };
        Ok(UpdateInfo { gamma, residual_norm: residual.norm(), rebased })
    }

    /// Recomputes projector and cache from the Gram matrix at the current `delta_t`.
    pub fn rebase_delta(&mut self) -> Result<()> {
        self.projector = soft_projector_from_gram(&self.gram, &self.projector.w, self.delta_t)?;
        self.since_rebase = 0;
        Ok(())
    }

    /// Batch projector at the current `delta_t`.
    pub fn batch_projector(&self) -> Result<SoftProjector> {
        soft_projector_from_gram(&self.gram, &self.projector.w, self.delta_t)
    }

    /// Relative Frobenius distance to the batch projector at `delta_t`.
    pub fn drift(&self) -> Result<f64> {
        let batch = self.batch_projector()?;
        Ok(linalg::rel_diff(&self.projector.p, &batch.p))
    }

    /// Smallest eigenvalue of the running Gram matrix (excitation monitor).
    pub fn gram_sigma_min(&self) -> f64 {
        linalg::sym_eigenvalues(&self.gram)[0].max(0.0)
    }

    /// Writes `P.csv`, `cache.csv`, `gram.csv`, `W.csv` and `scalars.csv`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        io::save_matrix(dir.join("P.csv"), &self.projector.p)?;
        io::save_matrix(dir.join("cache.csv"), &self.projector.gram_inv_cache)?;
        io::save_matrix(dir.join("gram.csv"), &self.gram)?;
        io::save_matrix(dir.join("W.csv"), &self.projector.w)?;
        let rebase = self.rebase_every.map_or(0, |k| k);
        io::save_table(
            dir.join("scalars.csv"),
            &[
                "delta_t",
                "epsilon",
                "trace_hht",
                "t",
                "projector_delta",
                "rebase_every",
                "frozen_schedule",
                "since_rebase",
            ],
            [vec![
                format!("{:e}", self.delta_t),
                format!("{:e}", self.epsilon),
                format!("{:e}", self.trace_hht),
                self.t.to_string(),
                format!("{:e}", self.projector.delta),
                rebase.to_string(),
                (self.frozen_schedule as u8).to_string(),
                self.since_rebase.to_string(),
            ]],
        )
    }

    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = io::load_matrix(dir.join("P.csv"))?;
        let gram_inv_cache = io::load_matrix(dir.join("cache.csv"))?;
        let gram = io::load_matrix(dir.join("gram.csv"))?;
        let w = io::load_matrix(dir.join("W.csv"))?;
        let (_, rows) = io::load_table(dir.join("scalars.csv"))?;
        let row = rows
            .first()
            .ok_or_else(|| Error::Parse("empty scalars.csv".into()))?;
        let num = |i: usize| -> Result<f64> {
            row.get(i)
                .ok_or_else(|| Error::Parse("short scalars.csv".into()))?
                .parse::<f64>()
                .map_err(|e| Error::Parse(e.to_string()))
        };
        let w_inv = linalg::spd_inverse(&w)?;
        let rebase = num(5)? as usize;
        Ok(Self {
            projector: SoftProjector { p, delta: num(4)?, w, w_inv, gram_inv_cache },
            delta_t: num(0)?,
            epsilon: num(1)?,
            trace_hht: num(2)?,
            gram,
            t: num(3)? as usize,
            rebase_every: (rebase > 0).then_some(rebase),
            frozen_schedule: num(6)? != 0.0,
            since_rebase: num(7)? as usize,
        })
    }
}
