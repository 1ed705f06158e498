//! Dense symmetric linear algebra used throughout the crate.
//!
//! Everything here is a pure function of its inputs. The eigensolver is
//! implemented in-crate (cyclic Jacobi for small matrices, Householder
//! tridiagonalization followed by implicit QL above that); Cholesky, LU and
//! SVD are taken from `nalgebra`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Tolerances and iteration caps shared by the kernels in this module.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericPolicy {
    /// Largest dimension handled by the Jacobi eigensolver.
    pub jacobi_max_dim: usize,
    pub jacobi_max_sweeps: usize,
    pub ql_max_iter: usize,
    /// Symmetry tolerance enforced by `SymMatrix` construction.
    pub symmetry_tol: f64,
    pub dlyap_max_doublings: usize,
    pub dlyap_rel_residual: f64,
    pub dare_max_iter: usize,
    pub dare_tol: f64,
    pub dare_rel_residual: f64,
}

impl Default for NumericPolicy {
    fn default() -> Self {
        Self {
            jacobi_max_dim: 64,
            jacobi_max_sweeps: 100,
            ql_max_iter: 60,
            symmetry_tol: 1e-12,
            dlyap_max_doublings: 64,
            dlyap_rel_residual: 1e-8,
            dare_max_iter: 10_000,
            dare_tol: 1e-13,
            dare_rel_residual: 1e-7,
        }
    }
}

/// A real symmetric matrix. Construction symmetrizes its input.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(contract(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(contract("symmetric matrix must have dimension >= 1"));
        }
        Ok(Self(symmetrize(&m)))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(&self.0 * s)
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Isometric vectorization of a symmetric matrix: upper triangle stored
/// column by column, off-diagonal entries scaled by sqrt(2).
#[derive(Debug, Clone, PartialEq)]
pub struct SVec {
    pub n: usize,
    pub data: Vec<f64>,
}

pub fn svec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of entry (i, j) (either order) in an `SVec` of dimension n.
#[inline]
pub fn svec_index(i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    j * (j + 1) / 2 + i
}

impl SVec {
    pub fn dot(&self, other: &SVec) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

pub fn svec(m: &SymMatrix) -> SVec {
    SVec {
        n: m.dim(),
        data: svec_of(m.as_matrix()),
    }
}

pub fn smat(v: &SVec) -> Result<SymMatrix> {
    if v.data.len() != svec_len(v.n) {
        return Err(contract(format!(
            "svec of dimension {} must have {} entries, got {}",
            v.n,
            svec_len(v.n),
            v.data.len()
        )));
    }
    SymMatrix::new(smat_of(&v.data, v.n))
}

/// `svec` on a raw (assumed symmetric) matrix; only the upper triangle is read.
pub fn svec_of(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(svec_len(n));
    for j in 0..n {
        for i in 0..=j {
            let v = m[(i, j)];
            out.push(if i == j { v } else { v * std::f64::consts::SQRT_2 });
        }
    }
    out
}

pub fn smat_of(data: &[f64], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let inv = std::f64::consts::FRAC_1_SQRT_2;
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            if i == j {
                m[(i, i)] = data[k];
            } else {
                m[(i, j)] = data[k] * inv;
                m[(j, i)] = data[k] * inv;
            }
            k += 1;
        }
    }
    m
}

/// Eigendecomposition with ascending eigenvalues and orthonormal eigenvector
/// columns.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.values[j];
        }
        &scaled * self.vectors.transpose()
    }
}

pub fn sym_eig(m: &SymMatrix) -> Result<SymEigen> {
    sym_eig_with(m.as_matrix(), &NumericPolicy::default())
}

/// Eigendecomposition of a raw matrix that the caller guarantees is symmetric.
pub fn sym_eig_with(m: &DMatrix<f64>, policy: &NumericPolicy) -> Result<SymEigen> {
    if m.nrows() <= policy.jacobi_max_dim {
        jacobi_eig(m, policy.jacobi_max_sweeps)
    } else {
        tridiagonal_ql_eig(m, policy.ql_max_iter)
    }
}

/// Cyclic Jacobi rotations until the off-diagonal mass is negligible.
pub fn jacobi_eig(m: &DMatrix<f64>, max_sweeps: usize) -> Result<SymEigen> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let total = a.norm();
    let mut converged = n <= 1;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for j in 0..n {
            for i in 0..j {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= f64::EPSILON * total.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::SolverFailure(format!(
            "Jacobi eigensolver did not converge in {max_sweeps} sweeps"
        )));
    }
    let values: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    Ok(sorted(values, v))
}

/// Householder tridiagonalization followed by the implicit QL algorithm.
pub fn tridiagonal_ql_eig(m: &DMatrix<f64>, max_iter: usize) -> Result<SymEigen> {
    let n = m.nrows();
    if n == 0 {
        return Ok(SymEigen {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    // Column-major working copy; v[i + n * j] is entry (i, j).
    let mut v: Vec<f64> = m.as_slice().to_vec();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(n, &mut v, &mut d, &mut e);
    tql2(n, &mut v, &mut d, &mut e, max_iter)?;
    Ok(sorted(d, DMatrix::from_vec(n, n, v)))
}

fn sorted(values: Vec<f64>, vectors: DMatrix<f64>) -> SymEigen {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| values[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &vectors.column(src));
    }
    SymEigen {
        values: vals,
        vectors: vecs,
    }
}

fn tred2(n: usize, v: &mut [f64], d: &mut [f64], e: &mut [f64]) {
    macro_rules! at {
        ($i:expr, $j:expr) => {
            v[($i) + n * ($j)]
        };
    }
    for j in 0..n {
        d[j] = at!(n - 1, j);
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = at!(i - 1, j);
                at!(i, j) = 0.0;
                at!(j, i) = 0.0;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                at!(j, i) = f;
                g = e[j] + at!(j, j) * f;
                for k in (j + 1)..i {
                    g += at!(k, j) * d[k];
                    e[k] += at!(k, j) * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    at!(k, j) -= f * e[k] + g * d[k];
                }
                d[j] = at!(i - 1, j);
                at!(i, j) = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..(n - 1) {
        at!(n - 1, i) = at!(i, i);
        at!(i, i) = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = at!(k, i + 1) / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += at!(k, i + 1) * at!(k, j);
                }
                for k in 0..=i {
                    at!(k, j) -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            at!(k, i + 1) = 0.0;
        }
    }
    for j in 0..n {
        d[j] = at!(n - 1, j);
        at!(n - 1, j) = 0.0;
    }
    at!(n - 1, n - 1) = 1.0;
    e[0] = 0.0;
}

fn tql2(n: usize, v: &mut [f64], d: &mut [f64], e: &mut [f64], max_iter: usize) -> Result<()> {
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > max_iter {
                    return Err(Error::SolverFailure(format!(
                        "implicit QL did not converge for eigenvalue {l} in {max_iter} iterations"
                    )));
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let (left, right) = v.split_at_mut(n * (i + 1));
                    let col_i = &mut left[n * i..];
                    let col_i1 = &mut right[..n];
                    for k in 0..n {
                        let hk = col_i1[k];
                        col_i1[k] = s * col_i[k] + c * hk;
                        col_i[k] = c * col_i[k] - s * hk;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    let eig = sym_eig_with(m, &NumericPolicy::default())?;
    Ok(eig.values.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Frobenius-nearest positive semidefinite matrix.
pub fn psd_project(m: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eig(m)?;
    Ok(SymMatrix(psd_from_eigen(&eig)))
}

pub(crate) fn psd_from_eigen(eig: &SymEigen) -> DMatrix<f64> {
    let n = eig.values.len();
    let mut out = DMatrix::zeros(n, n);
    for (k, &lam) in eig.values.iter().enumerate() {
        if lam <= 0.0 {
            continue;
        }
        let col = eig.vectors.column(k);
        for j in 0..n {
            let cj = lam * col[j];
            for i in 0..=j {
                out[(i, j)] += col[i] * cj;
            }
        }
    }
    for j in 0..n {
        for i in 0..j {
            out[(j, i)] = out[(i, j)];
        }
    }
    out
}

/// Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(m: &SymMatrix) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    nalgebra::Cholesky::new(m.as_matrix().clone())
        .ok_or_else(|| Error::SolverFailure("matrix is not positive definite".into()))
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &SymMatrix) -> Result<SymMatrix> {
    SymMatrix::new(cholesky(m)?.inverse())
}

/// Minimum-norm least-squares solution of `a x = b`.
pub fn least_squares(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(contract("least_squares: row count mismatch"));
    }
    let svd = a.clone().svd(true, true);
    svd.solve(b, 1e-12 * svd.singular_values.max().max(1.0))
        .map_err(|e| Error::SolverFailure(e.to_string()))
}

pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::SolverFailure("singular linear system".into()))
}

pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != a.ncols() {
        return Err(contract("spectral radius of a non-square matrix"));
    }
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    let schur = nalgebra::Schur::try_new(a.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::SolverFailure("Schur decomposition did not converge".into()))?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

pub fn dlyap(a: &DMatrix<f64>, q: &SymMatrix) -> Result<SymMatrix> {
    dlyap_with(a, q, &NumericPolicy::default())
}

/// Solves `aᵀ P a − P + q = 0` by Smith doubling.
pub fn dlyap_with(a: &DMatrix<f64>, q: &SymMatrix, policy: &NumericPolicy) -> Result<SymMatrix> {
    let n = q.dim();
    crate::error::ensure_shape("dlyap a", a.shape(), (n, n))?;
    let rad = spectral_radius(a)?;
    if rad >= 1.0 {
        return Err(Error::Unstable(format!(
            "dlyap requires spectral radius < 1, got {rad}"
        )));
    }
    let mut p = q.as_matrix().clone();
    let mut ak = a.clone();
    let mut converged = false;
    for _ in 0..policy.dlyap_max_doublings {
        let incr = ak.transpose() * &p * &ak;
        let done = incr.norm() <= f64::EPSILON * p.norm().max(f64::MIN_POSITIVE);
        p += incr;
        ak = &ak * &ak;
        if done || ak.norm() == 0.0 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SolverFailure(
            "Smith doubling did not converge for dlyap".into(),
        ));
    }
    let p = SymMatrix::new(p)?;
    let resid = (a.transpose() * p.as_matrix() * a - p.as_matrix() + q.as_matrix()).norm();
    let scale = q.as_matrix().norm() + p.as_matrix().norm() * (1.0 + a.norm().powi(2));
    if resid > policy.dlyap_rel_residual * scale.max(1e-300) {
        return Err(Error::SolverFailure(format!(
            "dlyap residual {resid:e} exceeds tolerance"
        )));
    }
    Ok(p)
}

/// Stabilizing DARE solution and the associated state-feedback gain
/// `K = (r + bᵀPb)⁻¹ bᵀPa`, so that `a − bK` is Schur stable.
#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p: SymMatrix,
    pub gain: DMatrix<f64>,
}

pub fn dare_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &SymMatrix,
    r: &SymMatrix,
) -> Result<DareSolution> {
    dare_gain_with(a, b, q, r, &NumericPolicy::default())
}

/// Structure-preserving doubling for the discrete algebraic Riccati equation.
pub fn dare_gain_with(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &SymMatrix,
    r: &SymMatrix,
    policy: &NumericPolicy,
) -> Result<DareSolution> {
    let n = a.nrows();
    crate::error::ensure_shape("dare a", a.shape(), (n, n))?;
    crate::error::ensure_shape("dare q", q.as_matrix().shape(), (n, n))?;
    if b.nrows() != n {
        return Err(contract("dare: b must have as many rows as a"));
    }
    crate::error::ensure_shape("dare r", r.as_matrix().shape(), (b.ncols(), b.ncols()))?;
    let r_inv = spd_inverse(r)?;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut ak = a.clone();
    let mut gk = b * r_inv.as_matrix() * b.transpose();
    let mut hk = q.as_matrix().clone();
    let mut converged = false;
    for _ in 0..policy.dare_max_iter {
        let w = &eye + &gk * &hk;
        let lu = w.lu();
        let x = lu
            .solve(&ak)
            .ok_or_else(|| Error::SolverFailure("doubling step hit a singular matrix".into()))?;
        let y = lu
            .solve(&gk)
            .ok_or_else(|| Error::SolverFailure("doubling step hit a singular matrix".into()))?;
        let h_next = symmetrize(&(&hk + ak.transpose() * &hk * &x));
        let g_next = symmetrize(&(&gk + &ak * &y * ak.transpose()));
        let a_next = &ak * &x;
        let delta = (&h_next - &hk).norm();
        hk = h_next;
        gk = g_next;
        ak = a_next;
        if !hk.iter().all(|v| v.is_finite()) {
            break;
        }
        if delta <= policy.dare_tol * hk.norm().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SolverFailure(
            "Riccati doubling did not converge".into(),
        ));
    }
    let p = SymMatrix::new(hk)?;
    let pm = p.as_matrix();
    let s = r.as_matrix() + b.transpose() * pm * b;
    let gain = solve(&s, &(b.transpose() * pm * a))?;
    let resid = (q.as_matrix() + a.transpose() * pm * a
        - a.transpose() * pm * b * &gain
        - pm)
        .norm();
    if resid > policy.dare_rel_residual * pm.norm().max(1.0) {
        return Err(Error::SolverFailure(format!(
            "Riccati residual {resid:e} exceeds tolerance"
        )));
    }
    let rad = spectral_radius(&(a - b * &gain))?;
    if rad >= 1.0 {
        return Err(Error::SolverFailure(format!(
            "Riccati gain is not stabilizing (closed-loop spectral radius {rad})"
        )));
    }
    Ok(DareSolution { p, gain })
}

/// Block-diagonal concatenation.
pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn sym(m: DMatrix<f64>) -> SymMatrix {
        SymMatrix::new(m).unwrap()
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let e = sym_eig(&SymMatrix::identity(3)).unwrap();
        assert_eq!(e.values.as_slice(), &[1.0, 1.0, 1.0]);
        let e = sym_eig(&SymMatrix::from_diagonal(&[2.0, -3.0])).unwrap();
        assert_eq!(e.values.as_slice(), &[-3.0, 2.0]);
    }

    #[test]
    fn eig_two_by_two_closed_form() {
        let m = sym(dmatrix![1.0, 0.5; 0.5, 1.0]);
        let e = sym_eig(&m).unwrap();
        assert!((e.values[0] - 0.5).abs() < 1e-14);
        assert!((e.values[1] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn both_eigensolvers_reconstruct() {
        let mut state = 7u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for n in [1usize, 2, 5, 17, 70, 130] {
            let raw = DMatrix::from_fn(n, n, |_, _| next());
            let m = symmetrize(&raw);
            for eig in [jacobi_eig(&m, 100).unwrap(), tridiagonal_ql_eig(&m, 60).unwrap()] {
                let err = (eig.reconstruct() - &m).norm();
                assert!(err <= 1e-9 * m.norm().max(1.0), "n={n} err={err}");
                let orth = (eig.vectors.transpose() * &eig.vectors - DMatrix::identity(n, n)).norm();
                assert!(orth < 1e-10);
                for k in 1..n {
                    assert!(eig.values[k - 1] <= eig.values[k]);
                }
            }
        }
    }

    #[test]
    fn psd_project_examples() {
        let p = psd_project(&SymMatrix::from_diagonal(&[2.0, -3.0])).unwrap();
        assert!((p.as_matrix() - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]))).norm() < 1e-14);
        let p = psd_project(&sym(dmatrix![0.0, 1.0; 1.0, 0.0])).unwrap();
        assert!((p.as_matrix() - dmatrix![0.5, 0.5; 0.5, 0.5]).norm() < 1e-14);
        let psd = sym(dmatrix![2.0, 1.0; 1.0, 3.0]);
        assert!((psd_project(&psd).unwrap().as_matrix() - psd.as_matrix()).norm() < 1e-10);
    }

    #[test]
    fn dlyap_examples() {
        let p = dlyap(&dmatrix![0.5], &sym(dmatrix![1.0])).unwrap();
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
        let p = dlyap(&DMatrix::zeros(2, 2), &SymMatrix::identity(2)).unwrap();
        assert!((p.as_matrix() - DMatrix::identity(2, 2)).norm() < 1e-15);
        let p = dlyap(&dmatrix![0.9, 0.0; 0.0, 0.5], &SymMatrix::identity(2)).unwrap();
        assert!((p[(0, 0)] - 1.0 / 0.19).abs() < 1e-9);
        assert!((p[(1, 1)] - 4.0 / 3.0).abs() < 1e-12);
        assert!(p[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn dlyap_rejects_unstable() {
        let err = dlyap(&dmatrix![1.0], &sym(dmatrix![1.0])).unwrap_err();
        assert!(matches!(err, Error::Unstable(_)));
    }

    #[test]
    fn dare_examples() {
        let one = sym(dmatrix![1.0]);
        let s = dare_gain(&dmatrix![0.0], &dmatrix![3.0], &one, &one).unwrap();
        assert!(s.gain[(0, 0)].abs() < 1e-15);

        let s = dare_gain(&dmatrix![2.0], &dmatrix![1.0], &one, &one).unwrap();
        // Scalar fixed-point iteration of the Riccati recursion as the oracle.
        let mut p = 1.0f64;
        for _ in 0..200 {
            p = 1.0 + 4.0 * p - 4.0 * p * p / (1.0 + p);
        }
        let k = 2.0 * p / (1.0 + p);
        assert!((s.gain[(0, 0)] - k).abs() < 1e-10);
        assert!((2.0 - s.gain[(0, 0)]).abs() < 1.0);

        let zero = sym(dmatrix![0.0]);
        let s = dare_gain(&dmatrix![0.5], &dmatrix![1.0], &zero, &one).unwrap();
        assert_eq!(s.gain[(0, 0)], 0.0);
    }

    #[test]
    fn dare_unstabilizable_fails() {
        let one = sym(dmatrix![1.0]);
        assert!(dare_gain(&dmatrix![2.0], &dmatrix![0.0], &one, &one).is_err());
    }

    #[test]
    fn shape_errors() {
        assert!(SymMatrix::new(DMatrix::zeros(2, 3)).is_err());
        assert!(SymMatrix::new(DMatrix::zeros(0, 0)).is_err());
        assert!(dlyap(&DMatrix::zeros(3, 3), &SymMatrix::identity(2)).is_err());
    }

    fn sym_strategy(max_n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        (1..=max_n).prop_flat_map(|n| {
            prop::collection::vec(-5.0f64..5.0, n * n)
                .prop_map(move |v| symmetrize(&DMatrix::from_vec(n, n, v)))
        })
    }

    proptest! {
        #[test]
        fn svec_round_trip_and_isometry(a in sym_strategy(6), seed in 0u64..1000) {
            let n = a.nrows();
            let b = symmetrize(&DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) as f64 + seed as f64).sin()));
            let sa = svec(&sym(a.clone()));
            let back = smat(&sa).unwrap();
            prop_assert!((back.as_matrix() - &a).norm() <= 1e-12);
            let sb = svec(&sym(b.clone()));
            let trace = (&a * &b).trace();
            prop_assert!((sa.dot(&sb) - trace).abs() <= 1e-10 * (1.0 + trace.abs()));
        }

        #[test]
        fn psd_project_is_nearest_and_idempotent(a in sym_strategy(5), seed in 0u64..u64::MAX) {
            let m = sym(a);
            let p = psd_project(&m).unwrap();
            let pp = psd_project(&p).unwrap();
            prop_assert!((pp.as_matrix() - p.as_matrix()).norm() <= 1e-9);
            prop_assert!(min_eigenvalue(p.as_matrix()).unwrap() >= -1e-10);
            let dist = (m.as_matrix() - p.as_matrix()).norm();
            let n = m.dim();
            let mut state = seed | 1;
            for _ in 0..1000 {
                let g = DMatrix::from_fn(n, n, |_, _| {
                    state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                    (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
                });
                let x = &g * g.transpose();
                prop_assert!(dist <= (m.as_matrix() - x).norm() + 1e-12);
            }
        }

        #[test]
        fn dlyap_gives_exact_decrease(v in prop::collection::vec(-1.0f64..1.0, 9), z in prop::collection::vec(-3.0f64..3.0, 3)) {
            let raw = DMatrix::from_vec(3, 3, v);
            let rad = spectral_radius(&raw).unwrap();
            let a = if rad > 0.0 { &raw * (0.9 / rad.max(0.9)) } else { raw };
            let q = SymMatrix::identity(3);
            let p = dlyap(&a, &q).unwrap();
            let zeta = DVector::from_vec(z);
            let vz = zeta.dot(&(p.as_matrix() * &zeta));
            let az = &a * &zeta;
            let vaz = az.dot(&(p.as_matrix() * &az));
            let scale = p.as_matrix().norm() * zeta.norm_squared();
            prop_assert!((vaz - vz + zeta.norm_squared()).abs() <= 1e-8 * scale.max(1.0));
        }
    }
}
