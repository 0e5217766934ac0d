//! Dense linear-algebra helpers shared by the projector, control and QP code.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};

/// Relative symmetry tolerance used when validating SPD inputs.
const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalue floor for the fallback inverse, relative to the trace.
const EIGEN_FLOOR: f64 = 1e-14;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize(&mut out);
    out
}

pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

fn ensure_square(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Checks that `m` is symmetric positive definite.
pub fn check_spd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    ensure_square(m, what)?;
    let scale = m.amax().max(1.0);
    if asymmetry(m) > SYMMETRY_TOL * scale {
        return Err(Error::Definiteness(format!("{what} is not symmetric")));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::Definiteness(format!("{what} has a non-positive eigenvalue")));
    }
    Ok(())
}

/// Inverse of a symmetric positive (semi)definite matrix.
///
/// Cholesky first; if that fails the inverse is formed from the symmetric
/// eigendecomposition with eigenvalues floored at `1e-14 * trace`.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_square(m, "matrix")?;
    let s = symmetrized(m);
    if let Some(chol) = s.clone().cholesky() {
        let mut inv = chol.inverse();
        symmetrize(&mut inv);
        return Ok(inv);
    }
    let trace = s.trace();
    if !(trace.is_finite() && trace > 0.0) {
        return Err(Error::Conditioning("matrix has non-positive trace".into()));
    }
    let floor = EIGEN_FLOOR * trace;
    let eig = SymmetricEigen::new(s);
    let inv_vals = eig.eigenvalues.map(|l| 1.0 / l.max(floor));
    let v = &eig.eigenvectors;
    let mut inv = v * DMatrix::from_diagonal(&inv_vals) * v.transpose();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Solves `m x = rhs` for symmetric positive definite `m`.
pub fn spd_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_square(m, "matrix")?;
    if let Some(chol) = symmetrized(m).cholesky() {
        return Ok(chol.solve(rhs));
    }
    Ok(spd_inverse(m)? * rhs)
}

pub fn spd_solve_vec(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    ensure_square(m, "matrix")?;
    if let Some(chol) = symmetrized(m).cholesky() {
        return Ok(chol.solve(rhs));
    }
    Ok(spd_inverse(m)? * rhs)
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = SVD::new(m.clone(), false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Smallest of the `min(rows, cols)` singular values.
pub fn sigma_min(m: &DMatrix<f64>) -> f64 {
    singular_values(m).last().copied().unwrap_or(0.0)
}

pub fn rank_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let s = singular_values(m);
    let Some(&smax) = s.first() else { return 0 };
    let tol = rank_tolerance(m.nrows(), m.ncols(), smax);
    s.iter().filter(|&&v| v > tol).count()
}

/// Orthonormal basis of the column space via QR with column pivoting.
///
/// Returns the basis and the detected rank.
pub fn orthonormal_basis(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return (DMatrix::zeros(rows, 0), 0);
    }
    let qr = m.clone().col_piv_qr();
    let r = qr.r();
    let diag_max = r[(0, 0)].abs();
    let tol = rank_tolerance(rows, cols, diag_max.max(f64::MIN_POSITIVE));
    let k = rows.min(cols);
    let rank = (0..k).take_while(|&i| r[(i, i)].abs() > tol).count();
    let q = qr.q();
    (q.columns(0, rank).into_owned(), rank)
}

/// Orthonormal basis of the leading `rank` left singular vectors.
pub fn truncated_left_basis(m: &DMatrix<f64>, rank: usize) -> DMatrix<f64> {
    let svd = SVD::new(m.clone(), true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out = DMatrix::zeros(m.nrows(), rank);
    for (dst, &src) in order.iter().take(rank).enumerate() {
        out.set_column(dst, &u.column(src));
    }
    out
}

/// Orthogonal projector onto the row space of `m`, i.e. `pinv(m) * m`.
pub fn row_space_projector(m: &DMatrix<f64>) -> DMatrix<f64> {
    let cols = m.ncols();
    if m.nrows() == 0 {
        return DMatrix::zeros(cols, cols);
    }
    let svd = SVD::new(m.clone(), false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let smax = svd.singular_values.max();
    let tol = rank_tolerance(m.nrows(), cols, smax);
    let mut proj = DMatrix::zeros(cols, cols);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            let v = v_t.row(i).transpose();
            proj += &v * v.transpose();
        }
    }
    symmetrize(&mut proj);
    proj
}

/// Principal square root of an SPD matrix.
pub fn spd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrized(m));
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let mut out = v * DMatrix::from_diagonal(&vals) * v.transpose();
    symmetrize(&mut out);
    out
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut vals: Vec<f64> = SymmetricEigen::new(symmetrized(m))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    vals
}

/// Condition number `sigma_max / sigma_min`.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Block-diagonal matrix assembled from square blocks.
pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut off = 0;
    for b in blocks {
        let k = b.nrows();
        out.view_mut((off, off), (k, k)).copy_from(b);
        off += k;
    }
    out
}

pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm().max(f64::MIN_POSITIVE);
    (a - b).norm() / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_inverse_matches_identity() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let inv = spd_inverse(&m).unwrap();
        assert!((&m * inv - DMatrix::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn spd_inverse_floors_singular_input() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let inv = spd_inverse(&m).unwrap();
        assert!(inv.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn check_spd_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(check_spd(&m, "W"), Err(Error::Definiteness(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(check_spd(&asym, "W").is_err());
    }

    #[test]
    fn qr_basis_detects_rank() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 1.0, 1.0]);
        let (q, r) = orthonormal_basis(&m);
        assert_eq!(r, 2);
        assert!((q.transpose() * &q - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn row_space_projector_is_idempotent() {
        let m = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 2.0, 1.0, 0.0, 1.0, 1.0, -1.0]);
        let p = row_space_projector(&m);
        assert!((&p * &p - &p).amax() < 1e-12);
        assert!((&m * &p - &m).amax() < 1e-12);
    }

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[5.0, 2.0, 2.0, 3.0]);
        let s = spd_sqrt(&m);
        assert!((&s * &s - m).amax() < 1e-12);
    }
}
