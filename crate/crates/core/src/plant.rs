//! Discrete-time LTI plant simulation, excitation experiments and SNR
//! calibration, plus the two-disc rotational plant used by the experiments.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Clone, Debug)]
pub struct PlantModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// Disturbance input map.
    pub e: DMatrix<f64>,
    pub dt: f64,
}

impl PlantModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        e: DMatrix<f64>,
        dt: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || c.ncols() != n || e.nrows() != n {
            return Err(Error::Dimension(format!(
                "non-conformal plant: A {:?}, B {:?}, C {:?}, E {:?}",
                a.shape(),
                b.shape(),
                c.shape(),
                e.shape()
            )));
        }
        Ok(Self { a, b, c, e, dt })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    pub fn disturbance_channels(&self) -> usize {
        self.e.ncols()
    }

    /// `x+ = A x + B u + E w_d`, `y = C x + v`.
    pub fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w_d: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        if x.len() != self.n() || u.len() != self.m() || w_d.len() != self.disturbance_channels() || v.len() != self.p() {
            return Err(Error::Dimension(format!(
                "step got x {}, u {}, w_d {}, v {} for n={}, m={}, d={}, p={}",
                x.len(),
                u.len(),
                w_d.len(),
                v.len(),
                self.n(),
                self.m(),
                self.disturbance_channels(),
                self.p()
            )));
        }
        let x_next = &self.a * x + &self.b * u + &self.e * w_d;
        let y = &self.c * x + v;
        Ok((x_next, y))
    }

    pub fn step_noiseless(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        self.step(x, u, &DVector::zeros(self.disturbance_channels()), &DVector::zeros(self.p()))
    }

    /// Noise-free outputs `y_0..y_{N-1}` for the inputs `u_0..u_{N-1}` from `x0`.
    pub fn simulate(&self, x0: &DVector<f64>, inputs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let mut x = x0.clone();
        let mut ys = Vec::with_capacity(inputs.len());
        for u in inputs {
            let (xn, y) = self.step_noiseless(&x, u)?;
            ys.push(y);
            x = xn;
        }
        Ok(ys)
    }

    pub fn is_reachable(&self) -> bool {
        let n = self.n();
        let mut blocks = Vec::with_capacity(n);
        let mut ak = self.b.clone();
        for _ in 0..n {
            blocks.push(ak.clone());
            ak = &self.a * ak;
        }
        let ctrb = DMatrix::from_fn(n, n * self.m(), |i, j| blocks[j / self.m()][(i, j % self.m())]);
        linalg::numerical_rank(&ctrb) == n
    }

    pub fn is_observable(&self) -> bool {
        let n = self.n();
        let p = self.p();
        let mut blocks = Vec::with_capacity(n);
        let mut ck = self.c.clone();
        for _ in 0..n {
            blocks.push(ck.clone());
            ck = ck * &self.a;
        }
        let obsv = DMatrix::from_fn(n * p, n, |i, j| blocks[i / p][(i % p, j)]);
        linalg::numerical_rank(&obsv) == n
    }

    /// Constant input holding the output at `y` in steady state, if one
    /// exists (least-squares residual below `1e-9`).
    pub fn steady_state_input(&self, y: &DVector<f64>) -> Option<DVector<f64>> {
        let n = self.n();
        let lu = (DMatrix::identity(n, n) - &self.a).lu();
        let gain = &self.c * lu.solve(&self.b)?;
        let u = gain.clone().svd(true, true).solve(y, 1e-12).ok()?;
        ((&gain * &u - y).norm() <= 1e-9 * (1.0 + y.norm())).then_some(u)
    }

    pub fn spectral_radius(&self) -> f64 {
        self.a
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

/// Physical parameters of the two-disc plant: two inertias coupled by a
/// torsional spring and damper, each disc damped to ground and the driven
/// disc additionally tied to ground by a spring. States are
/// `[theta1, theta2, omega1, omega2]`, outputs both angles, the input is the
/// torque on disc one and both discs receive disturbance torques.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoDiscParams {
    pub j1: f64,
    pub j2: f64,
    pub spring: f64,
    /// Ground spring on disc one; zero leaves a free rigid-body mode.
    pub ground_spring: f64,
    pub damping: f64,
    pub ground_damping: f64,
    pub dt: f64,
}

impl Default for TwoDiscParams {
    fn default() -> Self {
        Self { j1: 1.0, j2: 1.0, spring: 1.0, ground_spring: 1.0, damping: 0.5, ground_damping: 0.1, dt: 0.3 }
    }
}

impl TwoDiscParams {
    /// Zero-order-hold discretisation.
    pub fn model(&self) -> Result<PlantModel> {
        for (name, v) in [("j1", self.j1), ("j2", self.j2), ("dt", self.dt)] {
            if !(v > 0.0) {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        let (k, kg, c, cg) = (self.spring, self.ground_spring, self.damping, self.ground_damping);
        let (j1, j2) = (self.j1, self.j2);
        #[rustfmt::skip]
        let ac = DMatrix::from_row_slice(4, 4, &[
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
            -(k + kg) / j1, k / j1, -(c + cg) / j1, c / j1,
            k / j2, -k / j2, c / j2, -(c + cg) / j2,
        ]);
        let bc = DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0 / j1, 0.0]);
        let ec = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, 1.0 / j1, 0.0, 0.0, 1.0 / j2]);
        let c_out = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);

        // exp([[Ac, Bc Ec], [0, 0]] dt) yields A and the ZOH input maps
        let mut aug = DMatrix::zeros(7, 7);
        aug.view_mut((0, 0), (4, 4)).copy_from(&(ac * self.dt));
        aug.view_mut((0, 4), (4, 1)).copy_from(&(bc * self.dt));
        aug.view_mut((0, 5), (4, 2)).copy_from(&(ec * self.dt));
        let phi = aug.exp();
        let a = phi.view((0, 0), (4, 4)).into_owned();
        let b = phi.view((0, 4), (4, 1)).into_owned();
        let e = phi.view((0, 5), (4, 2)).into_owned();
        PlantModel::new(a, b, c_out, e, self.dt)
    }
}

/// The default two-disc plant.
pub fn case_study_plant() -> PlantModel {
    TwoDiscParams::default().model().expect("default parameters are valid")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Standard deviation per disturbance channel.
    pub process_std: Vec<f64>,
    /// Standard deviation per output; replaced by the calibrated value when
    /// `snr_target` is set.
    pub measurement_std: Vec<f64>,
    pub snr_target: Option<f64>,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn noiseless(model: &PlantModel) -> Self {
        Self {
            process_std: vec![0.0; model.disturbance_channels()],
            measurement_std: vec![0.0; model.p()],
            snr_target: None,
            seed: 0,
        }
    }

    pub fn validate(&self, model: &PlantModel) -> Result<()> {
        if self.process_std.len() != model.disturbance_channels() || self.measurement_std.len() != model.p() {
            return Err(Error::Dimension("noise configuration does not match plant channels".into()));
        }
        if self.process_std.iter().chain(&self.measurement_std).any(|&s| !(s >= 0.0)) {
            return Err(Error::Parameter("noise standard deviations must be non-negative".into()));
        }
        if let Some(snr) = self.snr_target {
            if !(snr > 0.0) {
                return Err(Error::Parameter("SNR target must be positive".into()));
            }
        }
        Ok(())
    }
}

pub fn gaussian_vector<R: Rng>(rng: &mut R, std: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        std.len(),
        std.iter().map(|&s| {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        }),
    )
}

/// Input/output record of an excitation experiment.
#[derive(Clone, Debug)]
pub struct CollectedData {
    pub u: Vec<DVector<f64>>,
    /// Measured outputs.
    pub y: Vec<DVector<f64>>,
    /// Outputs before measurement noise (process noise included).
    pub y_signal: Vec<DVector<f64>>,
    pub measurement_std: Vec<f64>,
}

/// White-noise excitation from the zero state.
pub fn collect_excitation_data(
    model: &PlantModel,
    t: usize,
    input_std: f64,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CollectedData> {
    if t == 0 {
        return Err(Error::InsufficientData("at least one sample is required".into()));
    }
    noise.validate(model)?;
    let m = model.m();
    let p = model.p();
    let u: Vec<DVector<f64>> = (0..t).map(|_| gaussian_vector(rng, &vec![input_std; m])).collect();
    let mut x = DVector::zeros(model.n());
    let mut y_signal = Vec::with_capacity(t);
    for uk in &u {
        let wd = gaussian_vector(rng, &noise.process_std);
        let (xn, y) = model.step(&x, uk, &wd, &DVector::zeros(p))?;
        y_signal.push(y);
        x = xn;
    }
    let measurement_std = match noise.snr_target {
        Some(snr) => calibrate_snr(&y_signal, snr)?,
        None => noise.measurement_std.clone(),
    };
    let y = y_signal
        .iter()
        .map(|ys| ys + gaussian_vector(rng, &measurement_std))
        .collect();
    Ok(CollectedData { u, y, y_signal, measurement_std })
}

/// Per-channel sample variance.
pub fn channel_variance(samples: &[DVector<f64>]) -> Vec<f64> {
    let Some(first) = samples.first() else { return Vec::new() };
    let n = samples.len() as f64;
    (0..first.len())
        .map(|c| {
            let mean = samples.iter().map(|s| s[c]).sum::<f64>() / n;
            samples.iter().map(|s| (s[c] - mean).powi(2)).sum::<f64>() / n
        })
        .collect()
}

/// Noise standard deviation per channel such that `var(signal) / var(noise) = snr`.
pub fn calibrate_snr(signal: &[DVector<f64>], snr: f64) -> Result<Vec<f64>> {
    if !(snr > 0.0) {
        return Err(Error::Parameter(format!("SNR must be positive, got {snr}")));
    }
    let var = channel_variance(signal);
    if var.is_empty() {
        return Err(Error::Calibration("no signal samples".into()));
    }
    var.iter()
        .enumerate()
        .map(|(c, &v)| {
            if v > 0.0 {
                Ok((v / snr).sqrt())
            } else {
                Err(Error::Calibration(format!("channel {c} has zero variance")))
            }
        })
        .collect()
}

/// Running plant with explicit state and RNG stream.
#[derive(Clone, Debug)]
pub struct PlantSim {
    pub model: PlantModel,
    pub x: DVector<f64>,
    pub process_std: Vec<f64>,
    pub measurement_std: Vec<f64>,
    pub rng: ChaCha8Rng,
}

/// One applied input and the resulting measurement.
#[derive(Clone, Debug)]
pub struct PlantSample {
    pub y_measured: DVector<f64>,
    pub y_true: DVector<f64>,
}

impl PlantSim {
    pub fn new(model: PlantModel, process_std: Vec<f64>, measurement_std: Vec<f64>, rng: ChaCha8Rng) -> Self {
        let x = DVector::zeros(model.n());
        Self { model, x, process_std, measurement_std, rng }
    }

    /// Measures `y_t`, then advances the state with `u_t`.
    pub fn apply(&mut self, u: &DVector<f64>) -> Result<PlantSample> {
        let wd = gaussian_vector(&mut self.rng, &self.process_std);
        let v = gaussian_vector(&mut self.rng, &self.measurement_std);
        let (xn, y_true) = self.model.step(&self.x, u, &wd, &DVector::zeros(self.model.p()))?;
        self.x = xn;
        Ok(PlantSample { y_measured: &y_true + v, y_true })
    }

    /// Swaps the dynamics while keeping the state.
    pub fn set_model(&mut self, model: PlantModel) -> Result<()> {
        if model.n() != self.model.n() || model.m() != self.model.m() || model.p() != self.model.p() {
            return Err(Error::Dimension("replacement plant has different dimensions".into()));
        }
        self.model = model;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn zero_step() {
        let plant = case_study_plant();
        let (xn, y) = plant.step_noiseless(&DVector::zeros(4), &DVector::zeros(1)).unwrap();
        assert_eq!(xn, DVector::zeros(4));
        assert_eq!(y, DVector::zeros(2));
    }

    #[test]
    fn double_integrator_hand_recursion() {
        let plant = PlantModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(2, 0),
            1.0,
        )
        .unwrap();
        let (xn, y) = plant.step_noiseless(&DVector::zeros(2), &dv(&[1.0])).unwrap();
        assert_eq!(xn.as_slice(), &[0.0, 1.0]);
        assert_eq!(y.as_slice(), &[0.0]);
    }

    #[test]
    fn superposition() {
        let plant = case_study_plant();
        let x1 = dv(&[0.1, -0.2, 0.3, 0.0]);
        let x2 = dv(&[-1.0, 0.5, 0.0, 2.0]);
        let u1 = dv(&[0.7]);
        let u2 = dv(&[-0.2]);
        let (a1, b1) = plant.step_noiseless(&x1, &u1).unwrap();
        let (a2, b2) = plant.step_noiseless(&x2, &u2).unwrap();
        let (a, b) = plant.step_noiseless(&(&x1 + &x2), &(&u1 + &u2)).unwrap();
        assert!((a - a1 - a2).amax() < 1e-14);
        assert!((b - b1 - b2).amax() < 1e-14);
    }

    #[test]
    fn step_dimension_error() {
        let plant = case_study_plant();
        let err = plant.step_noiseless(&DVector::zeros(3), &DVector::zeros(1));
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn case_study_structure() {
        let plant = case_study_plant();
        assert_eq!((plant.n(), plant.m(), plant.p(), plant.disturbance_channels()), (4, 1, 2, 2));
        assert!(plant.is_reachable() && plant.is_observable());
        assert!(plant.spectral_radius() <= 1.0 + 1e-12);
    }

    #[test]
    fn zero_excitation_gives_zero_outputs() {
        let plant = case_study_plant();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = collect_excitation_data(&plant, 50, 0.0, &NoiseConfig::noiseless(&plant), &mut rng).unwrap();
        assert!(data.y.iter().all(|y| y.amax() == 0.0));
    }

    #[test]
    fn same_seed_same_data() {
        let plant = case_study_plant();
        let noise = NoiseConfig {
            process_std: vec![0.05, 0.05],
            measurement_std: vec![0.0, 0.0],
            snr_target: Some(5.0),
            seed: 3,
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            collect_excitation_data(&plant, 200, 1.0, &noise, &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.u, b.u);
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn snr_calibration_examples() {
        let signal: Vec<_> = [1.0, -1.0, 1.0, -1.0].iter().map(|&v| dv(&[v])).collect();
        let std = calibrate_snr(&signal, 10.0).unwrap();
        assert!((std[0] - 0.1f64.sqrt()).abs() < 1e-15);
        let big = calibrate_snr(&signal, 1e12).unwrap();
        assert!(big[0] < 1e-5);
        let flat: Vec<_> = (0..4).map(|_| dv(&[2.0])).collect();
        assert!(matches!(calibrate_snr(&flat, 10.0), Err(Error::Calibration(_))));
    }

    #[test]
    fn snr_round_trip() {
        let plant = case_study_plant();
        let noise = NoiseConfig {
            process_std: vec![0.0, 0.0],
            measurement_std: vec![0.0, 0.0],
            snr_target: Some(10.0),
            seed: 11,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        let data = collect_excitation_data(&plant, 1000, 1.0, &noise, &mut rng).unwrap();
        let noise_samples: Vec<_> = data.y.iter().zip(&data.y_signal).map(|(a, b)| a - b).collect();
        let vs = channel_variance(&data.y_signal);
        let vn = channel_variance(&noise_samples);
        for c in 0..2 {
            let snr = vs[c] / vn[c];
            assert!((snr / 10.0 - 1.0).abs() < 0.05, "channel {c}: empirical SNR {snr}");
        }
    }
}
