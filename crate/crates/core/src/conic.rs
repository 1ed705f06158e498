//! Operator-splitting solver for proximal problems over an affine slice of a
//! product of PSD and nonnegative cones:
//!
//! ```text
//! minimize ‖x − x₀‖²  subject to  A x + c ∈ K
//! ```
//!
//! Iterates ADMM on the consensus form `s = A x + c`, `s ∈ K`. The x-update
//! solves `(I + σ AᵀA) x = x₀ + σ Aᵀ(s − c − u)` with a cached Cholesky
//! factor; the s-update is a blockwise cone projection.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::matkit::{smat_of, svec_len, tridiagonal_ql_eig};

/// Compressed sparse column matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscMatrix {
    /// Builds from per-column `(row, value)` lists. Duplicate rows inside a
    /// column are summed and exact zeros dropped.
    pub fn from_columns(nrows: usize, columns: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let ncols = columns.len();
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for mut col in columns {
            col.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < col.len() {
                let r = col[k].0;
                if r >= nrows {
                    return Err(contract("sparse entry row out of range"));
                }
                let mut v = 0.0;
                while k < col.len() && col[k].0 == r {
                    v += col[k].1;
                    k += 1;
                }
                if v != 0.0 {
                    row_idx.push(r);
                    values.push(v);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Ok(Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        })
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        self.row_idx[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    /// `out += A x`.
    pub fn mul_add(&self, x: &[f64], out: &mut [f64]) {
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                out[self.row_idx[k]] += self.values[k] * xj;
            }
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nrows];
        self.mul_add(x, &mut out);
        out
    }

    /// `Aᵀ y`.
    pub fn tmul(&self, y: &[f64]) -> Vec<f64> {
        (0..self.ncols)
            .map(|j| {
                let mut acc = 0.0;
                for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                    acc += self.values[k] * y[self.row_idx[k]];
                }
                acc
            })
            .collect()
    }

    /// Dense `AᵀA`.
    pub fn gram(&self) -> DMatrix<f64> {
        let n = self.ncols;
        if self.nnz() * 8 > self.nrows * n {
            // dense enough that a blocked matrix product wins
            let mut dense = DMatrix::zeros(self.nrows, n);
            for j in 0..n {
                for (r, v) in self.column(j) {
                    dense[(r, j)] += v;
                }
            }
            return dense.transpose() * &dense;
        }
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.nrows];
        for j in 0..self.ncols {
            for (r, v) in self.column(j) {
                rows[r].push((j, v));
            }
        }
        let mut g = vec![0.0; n * n];
        for row in &rows {
            for (a, &(ja, va)) in row.iter().enumerate() {
                let base = ja * n;
                for &(jb, vb) in &row[a..] {
                    g[base + jb] += va * vb;
                }
            }
        }
        // Entries were accumulated with ja ≤ jb only, i.e. in row-major
        // upper-triangular positions; mirror them.
        let mut m = DMatrix::from_row_slice(n, n, &g);
        for i in 0..n {
            for j in 0..i {
                m[(i, j)] = m[(j, i)];
            }
        }
        m
    }
}

/// One cone block of the constraint space, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "dim", rename_all = "kebab-case")]
pub enum Cone {
    /// PSD cone of n×n matrices stored as an svec of length n(n+1)/2.
    Psd(usize),
    NonNeg(usize),
}

impl Cone {
    pub fn len(&self) -> usize {
        match *self {
            Cone::Psd(n) => svec_len(n),
            Cone::NonNeg(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Euclidean projection of an svec onto the PSD cone, in place.
pub fn project_psd_svec(v: &mut [f64], n: usize) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    let m = smat_of(v, n);
    let eig = tridiagonal_ql_eig(&m, 60)?;
    let neg: Vec<usize> = (0..n).filter(|&k| eig.values[k] < 0.0).collect();
    if neg.is_empty() {
        return Ok(());
    }
    let pos: Vec<usize> = (0..n).filter(|&k| eig.values[k] > 0.0).collect();
    // Build whichever spectral part has fewer terms.
    let (keep_pos, idx) = if pos.len() <= neg.len() {
        (true, pos)
    } else {
        (false, neg)
    };
    let mut part = vec![0.0; svec_len(n)];
    for &k in &idx {
        let lam = eig.values[k];
        let col = eig.vectors.column(k);
        let mut p = 0;
        for j in 0..n {
            let cj = lam * col[j];
            for i in 0..=j {
                let w = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
                part[p] += w * col[i] * cj;
                p += 1;
            }
        }
    }
    if keep_pos {
        v.copy_from_slice(&part);
    } else {
        for (a, b) in v.iter_mut().zip(&part) {
            *a -= b;
        }
    }
    Ok(())
}

fn project_cones(cones: &[Cone], v: &mut [f64]) -> Result<()> {
    let mut off = 0;
    for cone in cones {
        let len = cone.len();
        let block = &mut v[off..off + len];
        match *cone {
            Cone::Psd(n) => project_psd_svec(block, n)?,
            Cone::NonNeg(_) => block.iter_mut().for_each(|x| *x = x.max(0.0)),
        }
        off += len;
    }
    Ok(())
}

/// `minimize ‖x − target‖²  s.t.  a x + c ∈ cones`.
#[derive(Debug, Clone)]
pub struct ProjectionProblem {
    pub a: CscMatrix,
    pub c: Vec<f64>,
    pub cones: Vec<Cone>,
    pub target: Vec<f64>,
}

impl ProjectionProblem {
    pub fn n_vars(&self) -> usize {
        self.a.ncols
    }

    pub fn n_constraints(&self) -> usize {
        self.a.nrows
    }

    pub fn validate(&self) -> Result<()> {
        let m: usize = self.cones.iter().map(Cone::len).sum();
        if m != self.a.nrows || self.c.len() != m {
            return Err(contract(format!(
                "cone dimensions sum to {m}, map has {} rows and c has {}",
                self.a.nrows,
                self.c.len()
            )));
        }
        if self.target.len() != self.a.ncols {
            return Err(contract("target length must equal the variable count"));
        }
        if self.c.iter().chain(&self.target).chain(&self.a.values).any(|v| !v.is_finite()) {
            return Err(contract("projection problem data must be finite"));
        }
        Ok(())
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// `A x + c`.
    pub fn constraint_value(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.c.clone();
        self.a.mul_add(x, &mut out);
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolverSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    /// Over-relaxation factor in (0, 2).
    pub alpha: f64,
    pub sigma_init: f64,
    pub adaptive_sigma: bool,
    /// Residuals are evaluated every this many iterations.
    pub check_every: usize,
    pub eps_infeasible: f64,
    /// Upper bound on refactorizations triggered by step-size adaptation.
    pub max_refactor: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-7,
            eps_rel: 1e-6,
            max_iter: 50_000,
            alpha: 1.6,
            sigma_init: 1.0,
            adaptive_sigma: true,
            check_every: 10,
            eps_infeasible: 1e-6,
            max_refactor: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    InfeasibleSuspected,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// `‖x − x₀ + Aᵀy‖ / max(1, ‖x − x₀‖, ‖Aᵀy‖)`.
    pub kkt_residual: f64,
    pub objective: f64,
    pub sigma: f64,
    pub refactorizations: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub seconds: f64,
}

/// Primal-dual iterate usable as a warm start. `y` is the unscaled dual
/// (`y ∈ −K` at convergence).
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    pub report: SolveReport,
}

impl Solution {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            x: self.x.clone(),
            s: self.s.clone(),
            y: self.y.clone(),
            sigma: self.report.sigma,
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn two_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct Factor {
    /// Lower Cholesky factor of `I + σ AᵀA`.
    l: DMatrix<f64>,
}

impl Factor {
    fn new(gram: &DMatrix<f64>, sigma: f64) -> Result<Self> {
        let n = gram.nrows();
        let mut k = gram * sigma;
        for i in 0..n {
            k[(i, i)] += 1.0;
        }
        let l = blocked_cholesky(k)
            .ok_or_else(|| Error::SolverFailure("x-update matrix is not positive definite".into()))?;
        Ok(Self { l })
    }

    fn solve(&self, rhs: Vec<f64>) -> Vec<f64> {
        let mut b = DVector::from_vec(rhs);
        self.l.solve_lower_triangular_unchecked_mut(&mut b);
        self.l.tr_solve_lower_triangular_unchecked_mut(&mut b);
        b.data.into()
    }
}

/// Right-looking blocked Cholesky; the trailing updates are matrix products.
fn blocked_cholesky(mut a: DMatrix<f64>) -> Option<DMatrix<f64>> {
    const NB: usize = 96;
    let n = a.nrows();
    let mut k = 0;
    while k < n {
        let b = NB.min(n - k);
        let diag = a.view((k, k), (b, b)).clone_owned();
        let l11 = nalgebra::Cholesky::new(diag)?.unpack();
        a.view_mut((k, k), (b, b)).copy_from(&l11);
        let rest = n - k - b;
        if rest > 0 {
            // L21 = A21 L11⁻ᵀ
            let mut l21t = a.view((k + b, k), (rest, b)).transpose();
            if !l11.solve_lower_triangular_mut(&mut l21t) {
                return None;
            }
            let l21 = l21t.transpose();
            a.view_mut((k + b, k), (rest, b)).copy_from(&l21);
            a.view_mut((k + b, k + b), (rest, rest)).gemm(-1.0, &l21, &l21t, 1.0);
        }
        k += b;
    }
    for j in 1..n {
        for i in 0..j {
            a[(i, j)] = 0.0;
        }
    }
    Some(a)
}

/// Reusable solve context: caches `AᵀA` for a fixed map.
pub struct ProjectionSolver<'a> {
    problem: &'a ProjectionProblem,
    gram: DMatrix<f64>,
    pub settings: SolverSettings,
}

impl<'a> ProjectionSolver<'a> {
    pub fn new(problem: &'a ProjectionProblem, settings: SolverSettings) -> Result<Self> {
        problem.validate()?;
        Ok(Self {
            problem,
            gram: problem.a.gram(),
            settings,
        })
    }

    pub fn solve(&self, warm: Option<&WarmStart>) -> Result<Solution> {
        let start = Instant::now();
        let p = self.problem;
        let st = &self.settings;
        let n = p.n_vars();
        let m = p.n_constraints();

        let (mut x, mut s, mut sigma, y0) = match warm {
            Some(w) if w.x.len() == n && w.s.len() == m && w.y.len() == m => {
                (w.x.clone(), w.s.clone(), w.sigma.max(1e-6), w.y.clone())
            }
            _ => {
                let x = p.target.clone();
                let mut s = p.constraint_value(&x);
                project_cones(&p.cones, &mut s)?;
                (x, s, st.sigma_init, vec![0.0; m])
            }
        };
        // Scaled dual u = y / σ.
        let mut u: Vec<f64> = y0.iter().map(|v| v / sigma).collect();
        let mut factor = Factor::new(&self.gram, sigma)?;
        let mut refactorizations = 1;

        let mut report = SolveReport {
            status: SolveStatus::MaxIter,
            iterations: 0,
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
            kkt_residual: f64::INFINITY,
            objective: f64::NAN,
            sigma,
            refactorizations,
            eps_abs: st.eps_abs,
            eps_rel: st.eps_rel,
            max_iter: st.max_iter,
            seconds: 0.0,
        };

        let mut u_prev_check = u.clone();
        let mut sigma_prev_check = sigma;
        let mut v = vec![0.0; m];
        let mut ax = vec![0.0; m];

        for it in 1..=st.max_iter {
            // x-update
            let w: Vec<f64> = (0..m).map(|i| s[i] - p.c[i] - u[i]).collect();
            let atw = p.a.tmul(&w);
            let rhs: Vec<f64> = (0..n).map(|j| p.target[j] + sigma * atw[j]).collect();
            x = factor.solve(rhs);

            ax.copy_from_slice(&p.c);
            p.a.mul_add(&x, &mut ax);
            for i in 0..m {
                v[i] = st.alpha * ax[i] + (1.0 - st.alpha) * s[i] + u[i];
            }
            let mut s_new = v.clone();
            project_cones(&p.cones, &mut s_new)?;
            for i in 0..m {
                u[i] = v[i] - s_new[i];
            }
            s = s_new;

            if it % st.check_every != 0 && it != st.max_iter {
                continue;
            }

            let r_prim: Vec<f64> = (0..m).map(|i| ax[i] - s[i]).collect();
            let aty = p.a.tmul(&u).into_iter().map(|g| g * sigma).collect::<Vec<_>>();
            let dx: Vec<f64> = (0..n).map(|j| x[j] - p.target[j]).collect();
            let r_dual: Vec<f64> = (0..n).map(|j| dx[j] + aty[j]).collect();
            let prim = inf_norm(&r_prim);
            let dual = inf_norm(&r_dual);
            let prim_scale = inf_norm(&ax).max(inf_norm(&s));
            let dual_scale = inf_norm(&x).max(inf_norm(&p.target)).max(inf_norm(&aty));
            report.iterations = it;
            report.primal_residual = prim;
            report.dual_residual = dual;
            report.kkt_residual =
                two_norm(&r_dual) / 1f64.max(two_norm(&dx)).max(two_norm(&aty));

            if !(prim.is_finite() && dual.is_finite()) {
                return Err(Error::SolverFailure(format!(
                    "non-finite residuals at iteration {it}"
                )));
            }

            if prim <= st.eps_abs + st.eps_rel * prim_scale
                && dual <= st.eps_abs + st.eps_rel * dual_scale
                && report.kkt_residual <= 5.0 * st.eps_rel
            {
                report.status = SolveStatus::Optimal;
                break;
            }

            // Infeasibility: w = −Δy lies in K with Aᵀw ≈ 0 and ⟨c, w⟩ < 0.
            if it >= 200 {
                let dy: Vec<f64> = (0..m)
                    .map(|i| -(u[i] * sigma - u_prev_check[i] * sigma_prev_check))
                    .collect();
                let nw = inf_norm(&dy);
                if nw > 0.0 {
                    let atw = inf_norm(&p.a.tmul(&dy));
                    let cw: f64 = p.c.iter().zip(&dy).map(|(a, b)| a * b).sum();
                    if atw <= st.eps_infeasible * nw && cw < -st.eps_infeasible * nw {
                        return Err(Error::Projection(format!(
                            "problem appears infeasible after {it} iterations \
                             (primal residual {prim:.3e}, certificate ‖Aᵀw‖/‖w‖ = {:.3e}, ⟨c,w⟩/‖w‖ = {:.3e})",
                            atw / nw,
                            cw / nw
                        )));
                    }
                }
            }
            u_prev_check.copy_from_slice(&u);
            sigma_prev_check = sigma;

            if st.adaptive_sigma && refactorizations < st.max_refactor && it % (5 * st.check_every) == 0 {
                let rp = prim / prim_scale.max(1e-12);
                let rd = dual / dual_scale.max(1e-12);
                let ratio = (rp / rd.max(1e-300)).sqrt();
                if ratio.is_finite() && !(0.2..=5.0).contains(&ratio) {
                    let new_sigma = (sigma * ratio).clamp(1e-6, 1e6);
                    if new_sigma != sigma {
                        for ui in u.iter_mut() {
                            *ui *= sigma / new_sigma;
                        }
                        for ui in u_prev_check.iter_mut() {
                            *ui *= sigma / new_sigma;
                        }
                        sigma = new_sigma;
                        sigma_prev_check = sigma;
                        factor = Factor::new(&self.gram, sigma)?;
                        refactorizations += 1;
                    }
                }
            }
        }

        report.sigma = sigma;
        report.refactorizations = refactorizations;
        report.objective = p.objective(&x);
        report.seconds = start.elapsed().as_secs_f64();
        let y = u.iter().map(|v| v * sigma).collect();
        Ok(Solution { x, s, y, report })
    }
}

pub fn solve_projection(
    problem: &ProjectionProblem,
    settings: &SolverSettings,
    warm: Option<&WarmStart>,
) -> Result<Solution> {
    ProjectionSolver::new(problem, settings.clone())?.solve(warm)
}

/// Largest deviation from `⟨A x, y⟩ = ⟨x, Aᵀ y⟩` over random pairs.
pub fn affine_map_adjoint_check(problem: &ProjectionProblem, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let x: Vec<f64> = (0..problem.n_vars()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..problem.n_constraints()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ax = problem.a.mul(&x);
        let aty = problem.a.tmul(&y);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        worst = worst.max((lhs - rhs).abs() / 1f64.max(lhs.abs()));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matkit::{psd_project, svec_of, SymMatrix};

    #[test]
    fn blocked_cholesky_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [1, 7, 96, 97, 250] {
            let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let a = &b * b.transpose() + DMatrix::identity(n, n);
            let l = blocked_cholesky(a.clone()).unwrap();
            let r = nalgebra::Cholesky::new(a.clone()).unwrap().unpack();
            assert!((&l - &r).amax() < 1e-10 * a.amax(), "n = {n}");
        }
        assert!(blocked_cholesky(-DMatrix::<f64>::identity(130, 130)).is_none());
    }

    /// `X ⪰ 0` with X itself as the variable (svec coordinates).
    fn pure_psd(c: &DMatrix<f64>) -> ProjectionProblem {
        let n = c.nrows();
        let len = svec_len(n);
        let columns = (0..len).map(|k| vec![(k, 1.0)]).collect();
        ProjectionProblem {
            a: CscMatrix::from_columns(len, columns).unwrap(),
            c: vec![0.0; len],
            cones: vec![Cone::Psd(n)],
            target: svec_of(c),
        }
    }

    fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (&m + m.transpose()) * 0.5
    }

    #[test]
    fn svec_projection_matches_psd_project() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1, 2, 5, 9] {
            let c = random_sym(&mut rng, n);
            let mut v = svec_of(&c);
            project_psd_svec(&mut v, n).unwrap();
            let want = psd_project(&SymMatrix::new(c).unwrap()).unwrap();
            assert!((smat_of(&v, n) - want.as_matrix()).amax() < 1e-12);
        }
    }

    #[test]
    fn pure_psd_toy_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [2, 4, 6] {
            let c = random_sym(&mut rng, n);
            let sol = solve_projection(&pure_psd(&c), &SolverSettings::default(), None).unwrap();
            assert_eq!(sol.report.status, SolveStatus::Optimal);
            let want = psd_project(&SymMatrix::new(c).unwrap()).unwrap();
            assert!((smat_of(&sol.x, n) - want.as_matrix()).amax() <= 1e-6);
        }
    }

    #[test]
    fn feasible_target_is_returned() {
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let sol = solve_projection(&pure_psd(&c), &SolverSettings::default(), None).unwrap();
        assert!((smat_of(&sol.x, 2) - &c).amax() <= 1e-5);
        assert!(sol.report.objective <= 1e-10);
    }

    #[test]
    fn infeasible_problem_is_flagged() {
        // x ≥ 1 and −x − 1 ≥ 0.
        let a = CscMatrix::from_columns(2, vec![vec![(0, 1.0), (1, -1.0)]]).unwrap();
        let p = ProjectionProblem {
            a,
            c: vec![-1.0, -1.0],
            cones: vec![Cone::NonNeg(2)],
            target: vec![0.0],
        };
        let err = solve_projection(&p, &SolverSettings::default(), None).unwrap_err();
        assert!(matches!(err, Error::Projection(_)));
    }

    #[test]
    fn warm_start_converges_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_sym(&mut rng, 5);
        let p = pure_psd(&c);
        let cold = solve_projection(&p, &SolverSettings::default(), None).unwrap();
        let warm = solve_projection(&p, &SolverSettings::default(), Some(&cold.warm_start())).unwrap();
        assert_eq!(warm.report.status, SolveStatus::Optimal);
        assert!(warm.report.iterations <= cold.report.iterations);
        // Identical inputs give identical outputs.
        let again = solve_projection(&p, &SolverSettings::default(), None).unwrap();
        assert_eq!(again.x, cold.x);
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let columns = (0..7)
            .map(|_| (0..5).map(|_| (rng.random_range(0..12), rng.random_range(-3.0..3.0))).collect())
            .collect();
        let p = ProjectionProblem {
            a: CscMatrix::from_columns(12, columns).unwrap(),
            c: vec![0.0; 12],
            cones: vec![Cone::Psd(3), Cone::NonNeg(6)],
            target: vec![0.0; 7],
        };
        assert!(affine_map_adjoint_check(&p, 50, 0) <= 1e-10);

        let zero = ProjectionProblem {
            a: CscMatrix::from_columns(3, vec![vec![]; 2]).unwrap(),
            c: vec![0.0; 3],
            cones: vec![Cone::NonNeg(3)],
            target: vec![0.0; 2],
        };
        assert_eq!(affine_map_adjoint_check(&zero, 10, 0), 0.0);

        let single = CscMatrix::from_columns(2, vec![vec![(0, 2.0), (1, -1.0)]]).unwrap();
        assert_eq!(single.mul(&[3.0]), vec![6.0, -3.0]);
        assert_eq!(single.tmul(&[1.0, 4.0]), vec![-2.0]);
    }

    #[test]
    fn gram_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let columns: Vec<Vec<(usize, f64)>> = (0..6)
            .map(|_| (0..4).map(|_| (rng.random_range(0..9), rng.random_range(-1.0..1.0))).collect())
            .collect();
        let a = CscMatrix::from_columns(9, columns).unwrap();
        let mut dense = DMatrix::zeros(9, 6);
        for j in 0..6 {
            for (r, v) in a.column(j) {
                dense[(r, j)] += v;
            }
        }
        assert!((a.gram() - dense.transpose() * &dense).amax() < 1e-14);
    }

    /// Tiny LMI `C0 + Σ xᵢ Cᵢ ⪰ 0` with a known interior point, plus `x ≥ −1`.
    fn tiny_instance(seed: u64) -> (ProjectionProblem, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nv = rng.random_range(2..=6);
        let n = rng.random_range(2..=3);
        let coeffs: Vec<DMatrix<f64>> = (0..nv).map(|_| random_sym(&mut rng, n)).collect();
        let xf: Vec<f64> = (0..nv).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut c0 = DMatrix::identity(n, n) * 0.2;
        for (c, x) in coeffs.iter().zip(&xf) {
            c0 -= c * *x;
        }
        let len = svec_len(n);
        let columns = (0..nv)
            .map(|k| {
                let mut col: Vec<(usize, f64)> =
                    svec_of(&coeffs[k]).into_iter().enumerate().collect();
                col.push((len + k, 1.0));
                col
            })
            .collect();
        let mut c = svec_of(&c0);
        c.extend(std::iter::repeat(1.0).take(nv));
        let target = (0..nv).map(|_| rng.random_range(-1.5..1.5)).collect();
        (
            ProjectionProblem {
                a: CscMatrix::from_columns(len + nv, columns).unwrap(),
                c,
                cones: vec![Cone::Psd(n), Cone::NonNeg(nv)],
                target,
            },
            n,
        )
    }

    fn feasible(p: &ProjectionProblem, n: usize, x: &[f64]) -> bool {
        let v = p.constraint_value(x);
        let len = svec_len(n);
        let m = smat_of(&v[..len], n);
        crate::matkit::min_eigenvalue(&m).unwrap() >= 0.0 && v[len..].iter().all(|t| *t >= 0.0)
    }

    #[test]
    fn tiny_instances_beat_random_search() {
        for seed in 0..5 {
            let (p, n) = tiny_instance(seed);
            let sol = solve_projection(&p, &SolverSettings::default(), None).unwrap();
            assert_eq!(sol.report.status, SolveStatus::Optimal);
            assert!(sol.report.kkt_residual <= 1e-5);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut best = f64::INFINITY;
            let radius = p.objective(&sol.x).sqrt() * 1.5 + 0.05;
            for _ in 0..200_000 {
                // Sample around the target, where the optimum must lie.
                let x: Vec<f64> = p
                    .target
                    .iter()
                    .map(|t| t + rng.random_range(-radius..radius))
                    .collect();
                let obj = p.objective(&x);
                if obj < best && feasible(&p, n, &x) {
                    best = obj;
                }
            }
            assert!(sol.report.objective <= best + 1e-4, "seed {seed}: {} vs {best}", sol.report.objective);
            // The constraint is satisfied up to the solver tolerance.
            let v = p.constraint_value(&sol.x);
            let len = svec_len(n);
            assert!(crate::matkit::min_eigenvalue(&smat_of(&v[..len], n)).unwrap() >= -1e-6);
        }
    }
}
