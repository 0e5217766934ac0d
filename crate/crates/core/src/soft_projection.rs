//! Soft projectors `H (H^T W H + delta I)^{-1} H^T`, their covariance form,
//! the projected-regularizer variant and approximation-error bounds.

use nalgebra::{DMatrix, DVector};

use crate::behavior::DataMatrix;
use crate::error::{Error, Result};
use crate::linalg;

/// Weighted soft projector together with the inverse used for rank-one updates.
#[derive(Clone, Debug)]
pub struct SoftProjector {
    pub p: DMatrix<f64>,
    pub delta: f64,
    pub w: DMatrix<f64>,
    pub w_inv: DMatrix<f64>,
    /// `(1/delta * W H H^T W + W)^{-1}`, equal to `W^{-1} - P`.
    pub gram_inv_cache: DMatrix<f64>,
}

impl SoftProjector {
    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    /// `I - P`, formed from the cached inverse so that small `delta` does not
    /// cancel catastrophically when `W = I`.
    pub fn complement(&self) -> DMatrix<f64> {
        let n = self.dim();
        // `I - W^{-1}` first: it vanishes exactly for `W = I`, leaving the cache intact.
        let mut c = DMatrix::identity(n, n) - &self.w_inv + &self.gram_inv_cache;
        linalg::symmetrize(&mut c);
        c
    }

    /// Eigenvalues of `W^{1/2} P W^{1/2}`, ascending.
    pub fn weighted_eigenvalues(&self) -> Vec<f64> {
        let ws = linalg::spd_sqrt(&self.w);
        linalg::sym_eigenvalues(&(&ws * &self.p * &ws))
    }
}

fn validate(h: &DMatrix<f64>, w: &DMatrix<f64>, delta: f64) -> Result<DMatrix<f64>> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Parameter(format!("delta must be positive, got {delta}")));
    }
    if w.nrows() != h.nrows() {
        return Err(Error::Dimension(format!(
            "W is {}x{} but H has {} rows",
            w.nrows(),
            w.ncols(),
            h.nrows()
        )));
    }
    linalg::check_spd(w, "W")?;
    linalg::spd_inverse(w)
}

/// Direct form: inverts the `D x D` matrix `H^T W H + delta I`.
pub fn soft_projector_direct(h: &DMatrix<f64>, w: &DMatrix<f64>, delta: f64) -> Result<SoftProjector> {
    let w_inv = validate(h, w, delta)?;
    let d = h.ncols();
    let inner = h.transpose() * w * h + DMatrix::identity(d, d) * delta;
    let mut p = h * linalg::spd_solve(&inner, &h.transpose())?;
    linalg::symmetrize(&mut p);
    let gram_inv_cache = &w_inv - &p;
    Ok(SoftProjector { p, delta, w: w.clone(), w_inv, gram_inv_cache })
}

/// Covariance form `W^{-1} - (1/delta W H H^T W + W)^{-1}`; only a `qL x qL`
/// inverse is needed.
pub fn soft_projector_covariance(
    h: &DMatrix<f64>,
    w: &DMatrix<f64>,
    delta: f64,
) -> Result<SoftProjector> {
    validate(h, w, delta)?;
    soft_projector_from_gram(&(h * h.transpose()), w, delta)
}

/// Covariance form from a precomputed Gram matrix `H H^T`.
///
/// With `W = L L^T` and `M = L^T H H^T L`, `P = L^{-T} (M + delta I)^{-1} M L^{-1}`
/// and the cache is `delta L^{-T} (M + delta I)^{-1} L^{-1}`, so neither is
/// formed as a difference.
pub fn soft_projector_from_gram(
    gram: &DMatrix<f64>,
    w: &DMatrix<f64>,
    delta: f64,
) -> Result<SoftProjector> {
    let w_inv = validate(gram, w, delta)?;
    let n = w.nrows();
    let l = linalg::symmetrized(w)
        .cholesky()
        .ok_or_else(|| Error::Definiteness("W has no Cholesky factor".into()))?
        .l();
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::Conditioning("Cholesky factor of W is singular".into()))?;
    let m = linalg::symmetrized(&(l.transpose() * gram * &l));
    let k = &m + DMatrix::identity(n, n) * delta;
    let mut p = l_inv.transpose() * linalg::spd_solve(&k, &m)? * &l_inv;
    linalg::symmetrize(&mut p);
    let mut gram_inv_cache = l_inv.transpose() * linalg::spd_inverse(&k)? * &l_inv * delta;
    linalg::symmetrize(&mut gram_inv_cache);
    Ok(SoftProjector { p, delta, w: w.clone(), w_inv, gram_inv_cache })
}

/// Spectral form `W^{-1/2} U diag(s^2 / (s^2 + delta)) U^T W^{-1/2}` from the
/// SVD `W^{1/2} H = U S V^T`. Slower than the other forms but accurate when
/// `H` is rank deficient and `delta` is tiny; returns the matrix only.
pub fn soft_projector_spectral(h: &DMatrix<f64>, w: &DMatrix<f64>, delta: f64) -> Result<DMatrix<f64>> {
    validate(h, w, delta)?;
    let w_half = linalg::spd_sqrt(w);
    let w_half_inv = linalg::spd_inverse(&w_half)?;
    let svd = (&w_half * h).svd(true, false);
    let u = svd.u.as_ref().expect("left vectors requested");
    let filt = svd.singular_values.map(|s| s * s / (s * s + delta));
    let mut p = &w_half_inv * u * DMatrix::from_diagonal(&filt) * u.transpose() * &w_half_inv;
    linalg::symmetrize(&mut p);
    Ok(p)
}

/// Picks the cheaper form: direct when `D <= 2 qL`, covariance otherwise.
pub fn soft_projector(h: &DMatrix<f64>, w: &DMatrix<f64>, delta: f64) -> Result<SoftProjector> {
    if h.ncols() <= 2 * h.nrows() {
        soft_projector_direct(h, w, delta)
    } else {
        soft_projector_covariance(h, w, delta)
    }
}

/// Orthogonal projector (`D x D`) onto the row space of `[Z_p; U_f]`.
pub fn regularizer_pi(data: &DataMatrix) -> DMatrix<f64> {
    linalg::row_space_projector(&data.zp_uf())
}

/// `H (H^T H + delta (I - Pi))^{-1} H^T` on the permuted data matrix.
pub fn projected_soft_projector(data: &DataMatrix, delta: f64) -> Result<DMatrix<f64>> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Parameter(format!("delta must be positive, got {delta}")));
    }
    let h = data.permuted();
    let d = h.ncols();
    let pi = regularizer_pi(data);
    let mut inner = h.transpose() * &h + (DMatrix::identity(d, d) - pi) * delta;
    linalg::symmetrize(&mut inner);
    let chol = match inner.clone().cholesky() {
        Some(c) => c,
        None => {
            let jitter = 1e-12 * inner.trace();
            for i in 0..d {
                inner[(i, i)] += jitter;
            }
            inner.cholesky().ok_or_else(|| {
                Error::Conditioning("projected soft projector inner matrix is singular".into())
            })?
        }
    };
    let mut p = &h * chol.solve(&h.transpose());
    linalg::symmetrize(&mut p);
    Ok(p)
}

/// `H = B S + E` with orthonormal `B`.
#[derive(Clone, Debug)]
pub struct NoiseDecomposition {
    pub b: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub e: DMatrix<f64>,
}

impl NoiseDecomposition {
    pub fn new(b: DMatrix<f64>, s: DMatrix<f64>, e: DMatrix<f64>) -> Result<Self> {
        if b.ncols() != s.nrows() || b.nrows() != e.nrows() || s.ncols() != e.ncols() {
            return Err(Error::Dimension("B, S and E are not conformal".into()));
        }
        let d = b.ncols();
        if (b.transpose() * &b - DMatrix::identity(d, d)).amax() > 1e-10 {
            return Err(Error::Parameter("B must have orthonormal columns".into()));
        }
        Ok(Self { b, s, e })
    }

    pub fn h(&self) -> DMatrix<f64> {
        &self.b * &self.s + &self.e
    }
}

/// Components of the soft-projector approximation bound at one `delta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundReport {
    pub delta: f64,
    pub gamma: f64,
    pub bias_term: f64,
    pub variance_term: f64,
    pub kappa_w: f64,
    pub sigma_min_wh: f64,
    pub sigma_min_signal: f64,
}

impl BoundReport {
    pub const CSV_HEADER: [&'static str; 5] =
        ["delta", "variance_term", "bias_term", "gamma", "empirical_gap"];

    pub fn csv_row(&self, empirical_gap: f64) -> [String; 5] {
        [
            format!("{:e}", self.delta),
            format!("{:e}", self.variance_term),
            format!("{:e}", self.bias_term),
            format!("{:e}", self.gamma),
            format!("{:e}", empirical_gap),
        ]
    }
}

/// Smallest singular value counted over all rows (zero for wide deficits).
fn sigma_min_rows(m: &DMatrix<f64>) -> f64 {
    if m.ncols() < m.nrows() {
        0.0
    } else {
        linalg::sigma_min(m)
    }
}

/// Upper bound on `||P~_H^W - P_B^W||_2` split into variance and bias terms.
pub fn error_bound(decomp: &NoiseDecomposition, w: &DMatrix<f64>, delta: f64) -> Result<BoundReport> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Parameter(format!("delta must be positive, got {delta}")));
    }
    linalg::check_spd(w, "W")?;
    let NoiseDecomposition { b, s, e } = decomp;
    if linalg::numerical_rank(s) < s.nrows() {
        return Err(Error::Rank("signal coefficient matrix S is rank deficient".into()));
    }
    let h = decomp.h();
    let kappa_w = linalg::condition_number(w);
    let s_norm = linalg::spectral_norm(s);
    let e_norm = linalg::spectral_norm(e);
    let sigma_min_wh = sigma_min_rows(&(linalg::spd_sqrt(w) * &h));
    let signal = b.transpose() * w * b * s * s.transpose();
    let sigma_min_signal = linalg::sigma_min(&signal);
    let w_inv_norm = 1.0 / linalg::sym_eigenvalues(w)[0];

    let variance_term =
        kappa_w * (2.0 * s_norm * e_norm + e_norm * e_norm) / (sigma_min_wh.powi(2) + delta);
    let bias_term = delta * w_inv_norm / (sigma_min_signal + delta);
    Ok(BoundReport {
        delta,
        gamma: variance_term + bias_term,
        bias_term,
        variance_term,
        kappa_w,
        sigma_min_wh,
        sigma_min_signal,
    })
}

/// The unweighted bound written directly in terms of `H`, `S` and `E`.
pub fn unweighted_error_bound(decomp: &NoiseDecomposition, delta: f64) -> f64 {
    let s_norm = linalg::spectral_norm(&decomp.s);
    let e_norm = linalg::spectral_norm(&decomp.e);
    let smin_h = sigma_min_rows(&decomp.h());
    let smin_s = linalg::sigma_min(&decomp.s);
    (2.0 * s_norm * e_norm + e_norm * e_norm) / (smin_h * smin_h + delta)
        + delta / (smin_s * smin_s + delta)
}

/// Bound on the distance between the data-driven and exact unconstrained
/// solutions: `gamma * ||W target||`.
pub fn solution_error_bound(report: &BoundReport, w: &DMatrix<f64>, target: &DVector<f64>) -> f64 {
    report.gamma * (w * target).norm()
}

/// Pairs `(sigma_i, sigma_i^2 / (sigma_i^2 + delta))`, descending in `sigma_i`.
pub fn eigen_filter(h: &DMatrix<f64>, delta: f64) -> Result<Vec<(f64, f64)>> {
    if !(delta >= 0.0) {
        return Err(Error::Parameter(format!("delta must be non-negative, got {delta}")));
    }
    Ok(linalg::singular_values(h)
        .into_iter()
        .map(|s| {
            let s2 = s * s;
            let f = if s2 + delta > 0.0 { s2 / (s2 + delta) } else { 0.0 };
            (s, f)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_form_agrees() {
        let h = DMatrix::from_fn(4, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 0.5, 3.0]));
        let a = soft_projector_direct(&h, &w, 0.3).unwrap().p;
        let b = soft_projector_spectral(&h, &w, 0.3).unwrap();
        assert!(linalg::rel_diff(&b, &a) < 1e-12);
    }

    #[test]
    fn identity_data() {
        let h = DMatrix::identity(2, 2);
        let w = DMatrix::identity(2, 2);
        let p = soft_projector_direct(&h, &w, 1.0).unwrap();
        assert!((p.p - DMatrix::identity(2, 2) * 0.5).amax() < 1e-15);
        let c = soft_projector_covariance(&h, &w, 1.0).unwrap();
        assert!((c.p - DMatrix::identity(2, 2) * 0.5).amax() < 1e-15);
    }

    #[test]
    fn no_data_gives_zero() {
        let h = DMatrix::zeros(3, 4);
        let w = DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 2.0, 3.0]));
        let p = soft_projector_covariance(&h, &w, 0.5).unwrap();
        assert!(p.p.amax() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        let h = DMatrix::identity(2, 2);
        let w = DMatrix::identity(2, 2);
        assert!(matches!(soft_projector_direct(&h, &w, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(soft_projector_covariance(&h, &w, -1.0), Err(Error::Parameter(_))));
        let not_spd = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(soft_projector_direct(&h, &not_spd, 1.0), Err(Error::Definiteness(_))));
    }

    #[test]
    fn filter_values() {
        let h = DMatrix::from_diagonal(&DVector::from_row_slice(&[2.0, 1.0]));
        let f = eigen_filter(&h, 1.0).unwrap();
        assert!((f[0].1 - 0.8).abs() < 1e-15);
        assert!((f[1].1 - 0.5).abs() < 1e-15);
        let hard = eigen_filter(&h, 0.0).unwrap();
        assert!(hard.iter().all(|&(_, v)| v == 1.0));
    }

    #[test]
    fn complement_is_scaled_resolvent_for_identity_weight() {
        let h = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
        let w = DMatrix::identity(2, 2);
        let delta = 1e-9;
        let sp = soft_projector_covariance(&h, &w, delta).unwrap();
        let resolvent = linalg::spd_inverse(&(&h * h.transpose() + DMatrix::identity(2, 2) * delta)).unwrap();
        let scaled = sp.complement() / delta;
        assert!(linalg::rel_diff(&scaled, &resolvent) < 1e-6);
    }

    #[test]
    fn solution_bound_scaling() {
        let report = BoundReport {
            delta: 1.0,
            gamma: 0.25,
            bias_term: 0.2,
            variance_term: 0.05,
            kappa_w: 1.0,
            sigma_min_wh: 1.0,
            sigma_min_signal: 1.0,
        };
        let t = DVector::from_row_slice(&[0.6, 0.8]);
        assert!((solution_error_bound(&report, &DMatrix::identity(2, 2), &t) - 0.25).abs() < 1e-15);
        let zero = BoundReport { gamma: 0.0, ..report };
        assert_eq!(solution_error_bound(&zero, &DMatrix::identity(2, 2), &t), 0.0);
    }
}
