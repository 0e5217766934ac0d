//! Trajectories, data matrices and exact behaviors of LTI systems.
//!
//! A length-`L` trajectory is stored as `[u_1; ..; u_L; y_1; ..; y_L]`
//! (all inputs first, then all outputs). Control problems work in the
//! permuted order `[u_ini; y_ini; u_f; y_f]`, which [`DataMatrix`] keeps as an
//! explicit row permutation rather than reordering the raw matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Channel counts and trajectory length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub m: usize,
    pub p: usize,
    pub l: usize,
}

impl Signature {
    pub fn new(m: usize, p: usize, l: usize) -> Result<Self> {
        if m == 0 || p == 0 || l == 0 {
            return Err(Error::Dimension(format!(
                "signature requires m, p, L >= 1 (got m={m}, p={p}, L={l})"
            )));
        }
        Ok(Self { m, p, l })
    }

    pub fn q(&self) -> usize {
        self.m + self.p
    }

    /// Length of a stacked trajectory, `q * L`.
    pub fn len(&self) -> usize {
        self.q() * self.l
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One stacked input/output trajectory in raw order.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub sig: Signature,
    pub w: DVector<f64>,
}

impl Trajectory {
    pub fn inputs(&self) -> Vec<DVector<f64>> {
        let Signature { m, l, .. } = self.sig;
        (0..l).map(|k| self.w.rows(k * m, m).into_owned()).collect()
    }

    pub fn outputs(&self) -> Vec<DVector<f64>> {
        let Signature { m, p, l } = self.sig;
        (0..l)
            .map(|k| self.w.rows(m * l + k * p, p).into_owned())
            .collect()
    }
}

/// Stacks `L` inputs and `L` outputs into `[u_1; ..; u_L; y_1; ..; y_L]`.
pub fn stack_trajectory(u_seq: &[DVector<f64>], y_seq: &[DVector<f64>]) -> Result<Trajectory> {
    if u_seq.len() != y_seq.len() {
        return Err(Error::Dimension(format!(
            "input sequence has {} samples, output sequence {}",
            u_seq.len(),
            y_seq.len()
        )));
    }
    if u_seq.is_empty() {
        return Err(Error::Dimension("empty trajectory".into()));
    }
    let m = u_seq[0].len();
    let p = y_seq[0].len();
    if u_seq.iter().any(|u| u.len() != m) || y_seq.iter().any(|y| y.len() != p) {
        return Err(Error::Dimension("samples have inconsistent channel counts".into()));
    }
    let sig = Signature::new(m, p, u_seq.len())?;
    let w = DVector::from_iterator(
        sig.len(),
        u_seq.iter().chain(y_seq.iter()).flat_map(|v| v.iter().copied()),
    );
    Ok(Trajectory { sig, w })
}

/// Row permutation from raw stacking order to `[u_ini; y_ini; u_f; y_f]`.
///
/// Entry `i` is the raw row that lands at permuted position `i`.
pub fn trajectory_permutation(sig: Signature, t_ini: usize) -> Vec<usize> {
    let Signature { m, p, l } = sig;
    let u_row = |k: usize, c: usize| k * m + c;
    let y_row = |k: usize, c: usize| m * l + k * p + c;
    let mut perm = Vec::with_capacity(sig.len());
    for k in 0..t_ini {
        perm.extend((0..m).map(|c| u_row(k, c)));
    }
    for k in 0..t_ini {
        perm.extend((0..p).map(|c| y_row(k, c)));
    }
    for k in t_ini..l {
        perm.extend((0..m).map(|c| u_row(k, c)));
    }
    for k in t_ini..l {
        perm.extend((0..p).map(|c| y_row(k, c)));
    }
    perm
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &j) in perm.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Gathers rows: `out[i] = v[perm[i]]`.
pub fn permute_vector(v: &DVector<f64>, perm: &[usize]) -> DVector<f64> {
    DVector::from_iterator(perm.len(), perm.iter().map(|&j| v[j]))
}

pub fn permute_rows(m: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(perm.len(), m.ncols(), |i, j| m[(perm[i], j)])
}

/// Data matrix whose columns are stacked length-`L` windows, together with
/// the split `L = T_ini + T_f` and the row permutation for control problems.
#[derive(Clone, Debug)]
pub struct DataMatrix {
    pub sig: Signature,
    /// Raw (unpermuted) data, `qL x D`.
    pub h: DMatrix<f64>,
    pub t_ini: usize,
    pub t_f: usize,
    pub perm: Vec<usize>,
}

impl DataMatrix {
    /// Wraps an existing raw-order matrix.
    pub fn from_raw(sig: Signature, h: DMatrix<f64>, t_ini: usize, t_f: usize) -> Result<Self> {
        if t_ini + t_f != sig.l {
            return Err(Error::Dimension(format!(
                "T_ini + T_f = {} but L = {}",
                t_ini + t_f,
                sig.l
            )));
        }
        if h.nrows() != sig.len() {
            return Err(Error::Dimension(format!(
                "data matrix has {} rows, expected qL = {}",
                h.nrows(),
                sig.len()
            )));
        }
        if h.ncols() == 0 {
            return Err(Error::InsufficientData("data matrix has no columns".into()));
        }
        let perm = trajectory_permutation(sig, t_ini);
        Ok(Self { sig, h, t_ini, t_f, perm })
    }

    pub fn ncols(&self) -> usize {
        self.h.ncols()
    }

    pub fn inverse_perm(&self) -> Vec<usize> {
        invert_permutation(&self.perm)
    }

    /// Data matrix with rows in `[w_ini; w_f]` order.
    pub fn permuted(&self) -> DMatrix<f64> {
        permute_rows(&self.h, &self.perm)
    }

    /// Length of the `w_ini` block, `q * T_ini`.
    pub fn ini_len(&self) -> usize {
        self.sig.q() * self.t_ini
    }

    /// Rows of the permuted matrix forming `Z_p` (all of `w_ini`) followed
    /// by `U_f` (future inputs).
    pub fn zp_uf_rows(&self) -> Vec<usize> {
        let uf = self.sig.m * self.t_f;
        (0..self.ini_len() + uf).collect()
    }

    /// Stacked `[Z_p; U_f]` block of the permuted data matrix.
    pub fn zp_uf(&self) -> DMatrix<f64> {
        let rows = self.zp_uf_rows();
        let hp = self.permuted();
        DMatrix::from_fn(rows.len(), hp.ncols(), |i, j| hp[(rows[i], j)])
    }

    pub fn column_trajectory(&self, j: usize) -> Trajectory {
        Trajectory {
            sig: self.sig,
            w: self.h.column(j).into_owned(),
        }
    }
}

/// Sliding-window data matrix: column `j` stacks samples `j..j+L-1`.
pub fn build_data_matrix(
    u_data: &[DVector<f64>],
    y_data: &[DVector<f64>],
    l: usize,
    t_ini: usize,
    t_f: usize,
) -> Result<DataMatrix> {
    if u_data.len() != y_data.len() {
        return Err(Error::Dimension(format!(
            "input data has {} samples, output data {}",
            u_data.len(),
            y_data.len()
        )));
    }
    if t_ini + t_f != l {
        return Err(Error::Dimension(format!("T_ini + T_f = {} but L = {l}", t_ini + t_f)));
    }
    let t = u_data.len();
    if t < l || l == 0 {
        return Err(Error::InsufficientData(format!(
            "{t} samples cannot fill a window of length {l}"
        )));
    }
    let d = t - l + 1;
    let first = stack_trajectory(&u_data[..l], &y_data[..l])?;
    let sig = first.sig;
    let mut h = DMatrix::zeros(sig.len(), d);
    h.set_column(0, &first.w);
    for j in 1..d {
        let traj = stack_trajectory(&u_data[j..j + l], &y_data[j..j + l])?;
        if traj.sig != sig {
            return Err(Error::Dimension("inconsistent channel counts in data".into()));
        }
        h.set_column(j, &traj.w);
    }
    DataMatrix::from_raw(sig, h, t_ini, t_f)
}

/// A subspace represented by a full-column-rank basis.
#[derive(Clone, Debug)]
pub struct Subspace {
    pub basis: DMatrix<f64>,
    pub orthonormal: bool,
}

impl Subspace {
    /// Validates full column rank.
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        let rank = linalg::numerical_rank(&basis);
        if rank != basis.ncols() {
            return Err(Error::Rank(format!(
                "basis with {} columns has numerical rank {rank}",
                basis.ncols()
            )));
        }
        Ok(Self { basis, orthonormal: false })
    }

    /// Orthonormal basis of `col(m)` (any rank).
    pub fn span_of(m: &DMatrix<f64>) -> Self {
        let (basis, _) = linalg::orthonormal_basis(m);
        Self { basis, orthonormal: true }
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient(&self) -> usize {
        self.basis.nrows()
    }

    pub fn orthonormalized(&self) -> Self {
        if self.orthonormal {
            return self.clone();
        }
        Self::span_of(&self.basis)
    }

    pub fn projector(&self) -> DMatrix<f64> {
        if self.orthonormal {
            let mut p = &self.basis * self.basis.transpose();
            linalg::symmetrize(&mut p);
            p
        } else {
            orthogonal_projector(&self.basis).expect("subspace basis has full column rank")
        }
    }

    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        Self {
            basis: permute_rows(&self.basis, perm),
            orthonormal: self.orthonormal,
        }
    }
}

/// Orthonormal basis of the restricted behavior of `(A, B, C)` over `L` steps.
///
/// The map `(x0, u) -> [u; y]` is orthonormalized with pivoted QR; its rank
/// must equal `mL + n`.
pub fn behavior_basis(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    l: usize,
) -> Result<Subspace> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || c.ncols() != n {
        return Err(Error::Dimension(format!(
            "non-conformal realization: A {}x{}, B {}x{}, C {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            c.nrows(),
            c.ncols()
        )));
    }
    let m = b.ncols();
    let p = c.nrows();
    let sig = Signature::new(m, p, l)?;
    let mut map = DMatrix::zeros(sig.len(), n + m * l);

    // Markov parameters C A^k B and observability blocks C A^k.
    let mut a_pow = DMatrix::identity(n, n);
    let mut obs = Vec::with_capacity(l);
    let mut markov = Vec::with_capacity(l);
    for _ in 0..l {
        obs.push(c * &a_pow);
        markov.push(c * &a_pow * b);
        a_pow = a * &a_pow;
    }
    for k in 0..l {
        let yr = m * l + k * p;
        map.view_mut((yr, 0), (p, n)).copy_from(&obs[k]);
        for j in 0..k {
            map.view_mut((yr, n + j * m), (p, m)).copy_from(&markov[k - j - 1]);
        }
        map.view_mut((k * m, n + k * m), (m, m)).fill_with_identity();
    }

    let (basis, rank) = linalg::orthonormal_basis(&map);
    if rank != m * l + n {
        return Err(Error::Rank(format!(
            "behavior has dimension {rank}, expected mL + n = {}; realization not minimal or L below the lag",
            m * l + n
        )));
    }
    Ok(Subspace { basis, orthonormal: true })
}

/// `P_U = U (U^T U)^{-1} U^T`.
pub fn orthogonal_projector(u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rank = linalg::numerical_rank(u);
    if rank != u.ncols() {
        return Err(Error::Rank(format!(
            "{} columns but numerical rank {rank}",
            u.ncols()
        )));
    }
    let gram = u.transpose() * u;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Rank("Gram matrix is not positive definite".into()))?;
    let mut p = u * chol.solve(&u.transpose());
    linalg::symmetrize(&mut p);
    Ok(p)
}

/// Weighted projector `P_B^W = B (B^T W B)^{-1} B^T`.
pub fn weighted_projector(b: &Subspace, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if w.nrows() != b.ambient() {
        return Err(Error::Dimension(format!(
            "weight is {}x{}, subspace ambient dimension {}",
            w.nrows(),
            w.ncols(),
            b.ambient()
        )));
    }
    linalg::check_spd(w, "W")?;
    let basis = &b.basis;
    let inner = basis.transpose() * w * basis;
    let mut p = basis * linalg::spd_solve(&inner, &basis.transpose())?;
    linalg::symmetrize(&mut p);
    Ok(p)
}

/// Gap metric `||P_U1 - P_U2||_2`; 1 when the dimensions differ.
pub fn gap_metric(u1: &Subspace, u2: &Subspace) -> Result<f64> {
    if u1.ambient() != u2.ambient() {
        return Err(Error::Dimension(format!(
            "ambient dimensions {} and {} differ",
            u1.ambient(),
            u2.ambient()
        )));
    }
    if u1.dim() != u2.dim() {
        return Ok(1.0);
    }
    let diff = u1.projector() - u2.projector();
    Ok(linalg::spectral_norm(&diff).min(1.0))
}
