use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::{ControlWeights, Layout, Method};
use crate::error::{Error, Result};
use crate::plant::{PlantModel, TwoDiscParams};
use crate::qp::{assemble_box_on_trajectory, ChannelBox, TrajectoryBox};

/// `count` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..count)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EigencurveConfig {
    pub sigmas: Vec<f64>,
    /// `alpha = alpha_hat / delta`.
    pub alpha: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub points: usize,
}

impl Default for EigencurveConfig {
    fn default() -> Self {
        Self {
            sigmas: vec![1000.0, 100.0, 50.0, 30.0, 20.0],
            alpha: 1e6,
            delta_min: 1e-3,
            delta_max: 1e3,
            points: 40,
        }
    }
}

/// Synthetic `H = B S + E` instance for the approximation-bound sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundConfig {
    pub columns: usize,
    /// Ratio of mean squared signal entry to noise variance.
    pub snr: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub points: usize,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self { columns: 200, snr: 1000.0, delta_min: 1e-3, delta_max: 1e3, points: 25 }
    }
}

/// Paired adaptive/frozen runs on a plant whose coupling stiffness changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineExperimentConfig {
    pub method: Method,
    pub alpha: f64,
    pub alpha_hat: f64,
    pub epsilon: f64,
    pub rebase_every: Option<usize>,
    /// Excitation samples before the loop starts.
    pub initial_length: usize,
    pub t_sim: usize,
    pub change_at: usize,
    /// Coupling spring after the change.
    pub spring_after: f64,
    /// Ground spring after the change.
    pub ground_spring_after: f64,
    pub probe_std: f64,
    pub process_std: Vec<f64>,
    pub measurement_std: Vec<f64>,
    pub reference_levels: Vec<Vec<f64>>,
    pub reference_period: usize,
    pub runs: usize,
}

impl Default for OnlineExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::SoftQuadratic,
            alpha: 1e6,
            alpha_hat: 1.0,
            epsilon: 1e-3,
            rebase_every: Some(crate::recursive::DEFAULT_REBASE_EVERY),
            initial_length: 100,
            t_sim: 400,
            change_at: 100,
            spring_after: 1.0,
            ground_spring_after: 0.5,
            probe_std: 0.2,
            process_std: vec![0.01, 0.01],
            measurement_std: vec![0.01, 0.01],
            reference_levels: vec![vec![0.8, 0.8], vec![-0.5, -0.5]],
            reference_period: 40,
            runs: 100,
        }
    }
}

/// Everything the experiment harness needs; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub plant: TwoDiscParams,
    pub t_ini: usize,
    pub t_f: usize,
    /// Output weight, row-major `p x p`.
    pub q: Vec<Vec<f64>>,
    /// Input weight, row-major `m x m`.
    pub r: Vec<Vec<f64>>,
    pub lambda_sigma: f64,
    pub y_ref: Vec<f64>,
    /// Defaults to zero.
    pub u_ref: Option<Vec<f64>>,
    pub u_box: Option<ChannelBox>,
    pub y_box: Option<ChannelBox>,
    pub lambda_g_grid: Vec<f64>,
    pub delta_grid: Vec<f64>,
    pub alpha: f64,
    pub alpha_hat: f64,
    pub epsilon: f64,
    pub data_length: usize,
    pub input_std: f64,
    pub process_std: Vec<f64>,
    /// Corrupt the measured initial window with the same output noise as the
    /// data. When false the plan starts from the exact (zero) window.
    pub noisy_initial_window: bool,
    pub snr_list: Vec<f64>,
    pub n_validation: usize,
    pub n_test: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub jobs: Option<usize>,
    /// Largest tolerated fraction of failed solves in a campaign.
    pub max_failure_rate: f64,
    pub eigencurves: EigencurveConfig,
    pub bound: BoundConfig,
    pub online: OnlineExperimentConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            plant: TwoDiscParams::default(),
            t_ini: 2,
            t_f: 12,
            q: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            r: vec![vec![0.01]],
            lambda_sigma: 1e6,
            y_ref: vec![0.8, 0.8],
            u_ref: None,
            u_box: Some(ChannelBox::symmetric(2.0, 1)),
            y_box: Some(ChannelBox::symmetric(1.0, 2)),
            lambda_g_grid: log_grid(10.0, 1e7, 13),
            delta_grid: log_grid(1e-3, 1e3, 13),
            alpha: 1e6,
            alpha_hat: 1.0,
            epsilon: crate::recursive::DEFAULT_EPSILON,
            data_length: 1000,
            input_std: 1.0,
            process_std: vec![0.05, 0.05],
            noisy_initial_window: true,
            snr_list: vec![10.0, 5.0, 3.0],
            n_validation: 100,
            n_test: 100,
            methods: vec![Method::DeepcL2, Method::SoftSquared],
            seed: 2024,
            out_dir: PathBuf::from("results"),
            jobs: None,
            max_failure_rate: 0.1,
            eigencurves: EigencurveConfig::default(),
            bound: BoundConfig::default(),
            online: OnlineExperimentConfig::default(),
        }
    }
}

fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension(format!("{name} must be a non-empty square matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model()?;
        let layout = self.layout()?;
        self.weights(&layout)?;
        if self.y_ref.len() != model.p() || self.u_ref.as_ref().is_some_and(|u| u.len() != model.m()) {
            return Err(Error::Dimension("reference does not match plant channels".into()));
        }
        self.bounds(&layout)?;
        if self.lambda_g_grid.is_empty() || self.delta_grid.is_empty() {
            return Err(Error::Parameter("parameter grids must be non-empty".into()));
        }
        if self.lambda_g_grid.iter().chain(&self.delta_grid).any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Parameter("grid values must be positive".into()));
        }
        if self.snr_list.is_empty() || self.snr_list.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Parameter("SNR list must contain positive values".into()));
        }
        if self.process_std.len() != model.disturbance_channels() {
            return Err(Error::Dimension("process_std must have one entry per disturbance channel".into()));
        }
        if self.data_length < self.t_ini + self.t_f {
            return Err(Error::InsufficientData("data_length is shorter than the horizon".into()));
        }
        if self.n_validation == 0 || self.n_test == 0 || self.methods.is_empty() {
            return Err(Error::Parameter("realization counts and method list must be non-empty".into()));
        }
        if !(self.alpha > 0.0 && self.alpha_hat > 0.0 && self.epsilon > 0.0) {
            return Err(Error::Parameter("alpha, alpha_hat and epsilon must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return Err(Error::Parameter("max_failure_rate must lie in [0, 1]".into()));
        }
        if self.eigencurves.sigmas.is_empty() || self.eigencurves.sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Parameter("eigencurve singular values must be positive".into()));
        }
        if self.online.change_at > self.online.t_sim || self.online.initial_length < self.t_ini + self.t_f {
            return Err(Error::Parameter("online experiment timing is inconsistent".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<PlantModel> {
        self.plant.model()
    }

    pub fn layout(&self) -> Result<Layout> {
        let model = self.model()?;
        Layout::new(model.m(), model.p(), self.t_ini, self.t_f)
    }

    pub fn weights(&self, layout: &Layout) -> Result<ControlWeights> {
        ControlWeights::new(matrix(&self.q, "Q")?, matrix(&self.r, "R")?, self.lambda_sigma, layout)
    }

    pub fn bounds(&self, layout: &Layout) -> Result<Option<TrajectoryBox>> {
        if self.u_box.is_none() && self.y_box.is_none() {
            return Ok(None);
        }
        assemble_box_on_trajectory(layout.sig, layout.t_ini, layout.t_f, self.u_box.as_ref(), self.y_box.as_ref())
            .map(Some)
    }

    pub fn y_ref_vec(&self) -> DVector<f64> {
        DVector::from_vec(self.y_ref.clone())
    }

    pub fn u_ref_vec(&self, m: usize) -> DVector<f64> {
        self.u_ref.clone().map_or_else(|| DVector::zeros(m), DVector::from_vec)
    }

    /// Grid swept for a method; the exact projection has no parameter.
    pub fn grid(&self, method: Method) -> Vec<f64> {
        match method {
            Method::DeepcL2 | Method::DeepcProjected => self.lambda_g_grid.clone(),
            Method::SoftSquared | Method::SoftQuadratic => self.delta_grid.clone(),
            Method::TrueProjection => vec![f64::NAN],
        }
    }
}
