use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ControlSolution, ControlTarget, ControlWeights, Controller, ControllerModel, Layout, Method, MethodConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::plant::{gaussian_vector, CollectedData, PlantModel, PlantSim};
use crate::qp::{assemble_box_on_trajectory, ChannelBox, QpSettings, TrajectoryBox};
use crate::recursive::RecursiveState;

/// Sliding record of the most recent input/output pairs.
#[derive(Clone, Debug)]
pub struct IoHistory {
    capacity: usize,
    buf: VecDeque<(DVector<f64>, DVector<f64>)>,
}

impl IoHistory {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), buf: VecDeque::with_capacity(capacity) }
    }

    pub fn from_data(capacity: usize, u: &[DVector<f64>], y: &[DVector<f64>]) -> Self {
        let mut h = Self::new(capacity);
        for (a, b) in u.iter().zip(y) {
            h.push(a.clone(), b.clone());
        }
        h
    }

    pub fn push(&mut self, u: DVector<f64>, y: DVector<f64>) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back((u, y));
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    /// Last `k` inputs and outputs, oldest first.
    pub fn last(&self, k: usize) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        if k > self.buf.len() {
            return Err(Error::InsufficientData(format!(
                "history holds {} samples, {k} requested",
                self.buf.len()
            )));
        }
        Ok(self.buf.iter().skip(self.buf.len() - k).map(|(u, y)| (u.clone(), y.clone())).unzip())
    }
}

/// Output reference, piecewise constant with an optional period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    /// Output levels cycled through; one level gives a constant reference.
    pub levels: Vec<Vec<f64>>,
    /// Steps spent on each level.
    pub period: usize,
    pub u_ref: Vec<f64>,
}

impl Reference {
    pub fn constant(y_ref: Vec<f64>, m: usize) -> Self {
        Self { levels: vec![y_ref], period: usize::MAX, u_ref: vec![0.0; m] }
    }

    pub fn switching(levels: Vec<Vec<f64>>, period: usize, m: usize) -> Self {
        Self { levels, period: period.max(1), u_ref: vec![0.0; m] }
    }

    pub fn y_at(&self, t: usize) -> DVector<f64> {
        let k = if self.period == usize::MAX { 0 } else { (t / self.period) % self.levels.len() };
        DVector::from_vec(self.levels[k].clone())
    }

    pub fn u_at(&self, _t: usize) -> DVector<f64> {
        DVector::from_vec(self.u_ref.clone())
    }

    /// Future reference block for the horizon starting at `t`.
    pub fn window(&self, layout: &Layout, t: usize) -> DVector<f64> {
        let us: Vec<_> = (0..layout.t_f).map(|k| self.u_at(t + k)).collect();
        let ys: Vec<_> = (0..layout.t_f).map(|k| self.y_at(t + k)).collect();
        layout.reference_from(&us, &ys)
    }

    fn validate(&self, layout: &Layout) -> Result<()> {
        if self.levels.is_empty()
            || self.levels.iter().any(|l| l.len() != layout.sig.p)
            || self.u_ref.len() != layout.sig.m
        {
            return Err(Error::Dimension("reference does not match channel counts".into()));
        }
        Ok(())
    }
}

/// Result of one receding-horizon step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub u_applied: DVector<f64>,
    pub y_measured: DVector<f64>,
    pub y_true: DVector<f64>,
    pub solution: ControlSolution,
}

/// Plans from the last `T_ini` samples, applies the first input (plus
/// `perturbation`, if any) and records the measurement in `history`.
pub fn receding_horizon_step(
    plant: &mut PlantSim,
    controller: &Controller,
    history: &mut IoHistory,
    w_ref: &DVector<f64>,
    perturbation: Option<&DVector<f64>>,
) -> Result<StepOutcome> {
    let layout = &controller.layout;
    let (u_ini, y_ini) = history.last(layout.t_ini)?;
    let target = ControlTarget::new(layout, layout.stack_ini(&u_ini, &y_ini)?, w_ref.clone())?;
    let solution = controller.solve(&target)?;
    let u_applied = match perturbation {
        Some(d) => &solution.u_apply + d,
        None => solution.u_apply.clone(),
    };
    let sample = plant.apply(&u_applied)?;
    history.push(u_applied.clone(), sample.y_measured.clone());
    Ok(StepOutcome { u_applied, y_measured: sample.y_measured, y_true: sample.y_true, solution })
}

/// Settings of the online adaptive loop.
#[derive(Clone, Debug)]
pub struct OnlineConfig {
    pub layout: Layout,
    pub weights: ControlWeights,
    /// `DeepcL2` runs the explicit map `w = P W t` on the weighted
    /// projector; the soft methods plan with the unweighted one.
    pub method: MethodConfig,
    pub epsilon: f64,
    pub rebase_every: Option<usize>,
    /// When false the projector stays at its initial value.
    pub adapt: bool,
    pub reference: Reference,
    pub u_box: Option<ChannelBox>,
    pub y_box: Option<ChannelBox>,
    /// Standard deviation of white noise added to the planned input.
    pub probe_std: f64,
    pub probe_seed: u64,
    /// Plant replacement applied before step `t`.
    pub plant_change: Option<(usize, PlantModel)>,
    pub settings: QpSettings,
}

impl OnlineConfig {
    fn projector_weight(&self) -> DMatrix<f64> {
        let n = self.layout.len();
        match self.method.method {
            Method::DeepcL2 => self.weights.w.clone(),
            _ => DMatrix::identity(n, n),
        }
    }

    fn bounds(&self) -> Result<Option<TrajectoryBox>> {
        if self.u_box.is_none() && self.y_box.is_none() {
            return Ok(None);
        }
        let l = &self.layout;
        assemble_box_on_trajectory(l.sig, l.t_ini, l.t_f, self.u_box.as_ref(), self.y_box.as_ref()).map(Some)
    }
}

/// One logged time step.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub t: usize,
    pub u: DVector<f64>,
    pub y: DVector<f64>,
    pub stage_cost: f64,
    pub cum_cost: f64,
    pub delta_t: f64,
    pub solver_iters: usize,
    /// Relative Frobenius distance of the recursive projector to the
    /// batch projector at the current `delta_t`.
    pub drift_diag: f64,
    pub gram_sigma_min: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub m: usize,
    pub p: usize,
    pub rows: Vec<LogRow>,
}

impl RunLog {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend((0..self.m).map(|i| format!("u{i}")));
        h.extend((0..self.p).map(|i| format!("y{i}")));
        h.extend(
            ["stage_cost", "cum_cost", "delta_t", "solver_iters", "drift_diag", "gram_sigma_min"]
                .map(String::from),
        );
        h
    }

    pub fn csv_rows(&self) -> impl Iterator<Item = Vec<String>> + '_ {
        self.rows.iter().map(|r| {
            let mut v = vec![r.t.to_string()];
            v.extend(r.u.iter().chain(r.y.iter()).map(|x| format!("{x:e}")));
            v.push(format!("{:e}", r.stage_cost));
            v.push(format!("{:e}", r.cum_cost));
            v.push(format!("{:e}", r.delta_t));
            v.push(r.solver_iters.to_string());
            v.push(format!("{:e}", r.drift_diag));
            v.push(format!("{:e}", r.gram_sigma_min));
            v
        })
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        io::save_table(path, &self.header(), self.csv_rows())
    }

    /// Sum of stage costs over `t` in `[from, to)`.
    pub fn cost_between(&self, from: usize, to: usize) -> f64 {
        self.rows.iter().filter(|r| r.t >= from && r.t < to).map(|r| r.stage_cost).sum()
    }

    pub fn total_cost(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cum_cost)
    }
}

/// Receding-horizon control with online rank-one updates of the soft
/// projector. `plant` must be in the state reached at the end of
/// `initial`, which seeds both the projector and the I/O history.
pub fn online_control_loop(
    plant: &mut PlantSim,
    initial: &CollectedData,
    config: &OnlineConfig,
    t_sim: usize,
) -> Result<RunLog> {
    let layout = config.layout;
    let l = layout.len() / layout.sig.q();
    config.reference.validate(&layout)?;
    if !matches!(config.method.method, Method::DeepcL2 | Method::SoftSquared | Method::SoftQuadratic) {
        return Err(Error::Parameter(format!("{} cannot run online", config.method.method)));
    }
    if initial.u.len() < l || initial.u.len() != initial.y.len() {
        return Err(Error::InsufficientData(format!(
            "initial data has {} samples, horizon is {l}",
            initial.u.len()
        )));
    }
    let data = crate::behavior::build_data_matrix(&initial.u, &initial.y, l, layout.t_ini, layout.t_f)?;
    let mut state = RecursiveState::init(&data.permuted(), &config.projector_weight(), config.epsilon)?
        .with_rebase_every(config.rebase_every);
    let bounds = config.bounds()?;
    let mut history = IoHistory::from_data(l, &initial.u, &initial.y);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(config.probe_seed);
    let probe_std = vec![config.probe_std; layout.sig.m];
    let mut log = RunLog { m: layout.sig.m, p: layout.sig.p, rows: Vec::with_capacity(t_sim) };
    let mut cum = 0.0;

    for t in 0..t_sim {
        if let Some((at, model)) = &config.plant_change {
            if *at == t {
                plant.set_model(model.clone())?;
            }
        }
        let model = if config.method.method == Method::DeepcL2 {
            ControllerModel::ExplicitDeepc(state.projector.clone())
        } else {
            ControllerModel::Soft(state.projector.clone())
        };
        let mut method = config.method;
        method.delta = state.projector.delta;
        let controller = Controller::new(layout, config.weights.clone(), method, model, bounds.clone())?
            .with_settings(config.settings);
        let probe = (config.probe_std > 0.0).then(|| gaussian_vector(&mut probe_rng, &probe_std));
        let step = receding_horizon_step(plant, &controller, &mut history, &config.reference.window(&layout, t), probe.as_ref())?;

        let stage = config.weights.tracking_cost(
            std::slice::from_ref(&step.u_applied),
            std::slice::from_ref(&step.y_true),
            &[config.reference.u_at(t)],
            &[config.reference.y_at(t)],
        );
        cum += stage;

        let drift = if config.adapt {
            let (us, ys) = history.last(l)?;
            state.update(&layout.stack(&us, &ys)?)?;
            state.drift()?
        } else {
            0.0
        };
        log.rows.push(LogRow {
            t,
            u: step.u_applied,
            y: step.y_measured,
            stage_cost: stage,
            cum_cost: cum,
            delta_t: state.delta_t,
            solver_iters: step.solution.iterations,
            drift_diag: drift,
            gram_sigma_min: state.gram_sigma_min(),
        });
    }
    Ok(log)
}
