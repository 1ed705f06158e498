//! ρ-hard IQC filters, multiplier cones and the extended plant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{contract, ensure_shape, Result};
use crate::plants::UncertainPlant;
use crate::serde_mat;

/// Filter Ψ driven by (p, q) with ψ(0) = 0, together with the multiplier
/// set `{M_fixed + Σ λᵢ Mᵢ : λ ≥ 0}` and decay rate ρ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqcSpec {
    #[serde(with = "serde_mat::matrix")]
    pub a_psi: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub b_psi1: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub b_psi2: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub c_psi: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub d_psi1: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub d_psi2: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub m_fixed: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix_vec")]
    pub m_basis: Vec<DMatrix<f64>>,
    pub rho: f64,
}

impl IqcSpec {
    pub fn n_psi(&self) -> usize {
        self.a_psi.nrows()
    }
    pub fn n_p(&self) -> usize {
        self.d_psi1.ncols()
    }
    pub fn n_q(&self) -> usize {
        self.d_psi2.ncols()
    }
    pub fn n_r(&self) -> usize {
        self.c_psi.nrows()
    }
    pub fn n_multipliers(&self) -> usize {
        self.m_basis.len()
    }

    /// Shape and symmetry checks. Dynamic filters are not checked for
    /// validity as IQCs.
    pub fn validate(&self) -> Result<()> {
        let (n_psi, n_p, n_q, n_r) = (self.n_psi(), self.n_p(), self.n_q(), self.n_r());
        ensure_shape("A_psi", self.a_psi.shape(), (n_psi, n_psi))?;
        ensure_shape("B_psi1", self.b_psi1.shape(), (n_psi, n_p))?;
        ensure_shape("B_psi2", self.b_psi2.shape(), (n_psi, n_q))?;
        ensure_shape("C_psi", self.c_psi.shape(), (n_r, n_psi))?;
        ensure_shape("D_psi1", self.d_psi1.shape(), (n_r, n_p))?;
        ensure_shape("D_psi2", self.d_psi2.shape(), (n_r, n_q))?;
        ensure_shape("M_fixed", self.m_fixed.shape(), (n_r, n_r))?;
        for m in self.m_basis.iter().chain(std::iter::once(&self.m_fixed)) {
            ensure_shape("multiplier basis", m.shape(), (n_r, n_r))?;
            if (m - m.transpose()).amax() > 0.0 {
                return Err(contract("multiplier matrices must be symmetric"));
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(contract(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        Ok(())
    }

    /// `M(λ) = M_fixed + Σ λᵢ Mᵢ`.
    pub fn multiplier(&self, lambda: &[f64]) -> Result<DMatrix<f64>> {
        if lambda.len() != self.m_basis.len() {
            return Err(contract("multiplier coordinate count mismatch"));
        }
        let mut m = self.m_fixed.clone();
        for (l, b) in lambda.iter().zip(&self.m_basis) {
            m += b * *l;
        }
        Ok(m)
    }
}

/// Static sector IQC for a scalar nonlinearity in sector `[α, β]`:
/// `Ψ = [[β, −1], [−α, 1]]`, `M = [[0, λ], [λ, 0]]`, λ ≥ 0.
pub fn sector_iqc(alpha: f64, beta: f64, rho: f64) -> Result<IqcSpec> {
    sector_iqc_channels(1, alpha, beta, rho)
}

/// Diagonal version of [`sector_iqc`] for `n` decoupled channels, one
/// multiplier per channel. `r = (βp − q, q − αp)`.
pub fn sector_iqc_channels(n: usize, alpha: f64, beta: f64, rho: f64) -> Result<IqcSpec> {
    if !(alpha <= beta) {
        return Err(contract(format!(
            "sector requires alpha <= beta, got [{alpha}, {beta}]"
        )));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let mut d1 = DMatrix::zeros(2 * n, n);
    d1.rows_mut(0, n).copy_from(&(&eye * beta));
    d1.rows_mut(n, n).copy_from(&(&eye * -alpha));
    let mut d2 = DMatrix::zeros(2 * n, n);
    d2.rows_mut(0, n).copy_from(&(-&eye));
    d2.rows_mut(n, n).copy_from(&eye);
    let m_basis = (0..n)
        .map(|i| {
            let mut m = DMatrix::zeros(2 * n, 2 * n);
            m[(i, n + i)] = 1.0;
            m[(n + i, i)] = 1.0;
            m
        })
        .collect();
    let spec = IqcSpec {
        a_psi: DMatrix::zeros(0, 0),
        b_psi1: DMatrix::zeros(0, n),
        b_psi2: DMatrix::zeros(0, n),
        c_psi: DMatrix::zeros(2 * n, 0),
        d_psi1: d1,
        d_psi2: d2,
        m_fixed: DMatrix::zeros(2 * n, 2 * n),
        m_basis,
        rho,
    };
    spec.validate()?;
    Ok(spec)
}

/// Plant G interconnected with the filter Ψ; state `x_e = (x, ψ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedSystem {
    #[serde(with = "serde_mat::matrix")]
    pub a_e: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub b_e1: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub b_e2: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub c_e1: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub d_e1: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub c_e2: DMatrix<f64>,
    pub n_psi: usize,
    pub n_r: usize,
}

impl ExtendedSystem {
    pub fn n_state(&self) -> usize {
        self.a_e.nrows()
    }
}

pub fn extend_system(plant: &UncertainPlant, filter: &IqcSpec) -> Result<ExtendedSystem> {
    filter.validate()?;
    if filter.n_p() != plant.n_p() || filter.n_q() != plant.n_q() {
        return Err(contract(format!(
            "filter expects (n_p, n_q) = ({}, {}), plant has ({}, {})",
            filter.n_p(),
            filter.n_q(),
            plant.n_p(),
            plant.n_q()
        )));
    }
    let n_g = plant.n_state();
    let n_psi = filter.n_psi();
    let n = n_g + n_psi;

    let mut a_e = DMatrix::zeros(n, n);
    a_e.view_mut((0, 0), (n_g, n_g)).copy_from(&plant.a_g);
    a_e.view_mut((n_g, 0), (n_psi, n_g))
        .copy_from(&(&filter.b_psi1 * &plant.c_g1));
    a_e.view_mut((n_g, n_g), (n_psi, n_psi)).copy_from(&filter.a_psi);

    let mut b_e1 = DMatrix::zeros(n, plant.n_q());
    b_e1.rows_mut(0, n_g).copy_from(&plant.b_g1);
    b_e1.rows_mut(n_g, n_psi)
        .copy_from(&(&filter.b_psi1 * &plant.d_g1 + &filter.b_psi2));

    let mut b_e2 = DMatrix::zeros(n, plant.n_input());
    b_e2.rows_mut(0, n_g).copy_from(&plant.b_g2);

    let mut c_e1 = DMatrix::zeros(filter.n_r(), n);
    c_e1.columns_mut(0, n_g)
        .copy_from(&(&filter.d_psi1 * &plant.c_g1));
    c_e1.columns_mut(n_g, n_psi).copy_from(&filter.c_psi);

    let d_e1 = &filter.d_psi1 * &plant.d_g1 + &filter.d_psi2;

    let mut c_e2 = DMatrix::zeros(plant.n_output(), n);
    c_e2.columns_mut(0, n_g).copy_from(&plant.c_g2);

    Ok(ExtendedSystem {
        a_e,
        b_e1,
        b_e2,
        c_e1,
        d_e1,
        c_e2,
        n_psi,
        n_r: filter.n_r(),
    })
}

/// Outcome of a trace-level IQC check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IqcCheck {
    pub holds: bool,
    /// Smallest partial sum `Σ_{k≤N'} ρ^{-2k} r(k)ᵀ M r(k)` over N' ≤ N.
    pub worst_partial_sum: f64,
}

/// Runs Ψ over the traces from ψ(0) = 0 and checks every partial sum of the
/// ρ-weighted quadratic form up to index `n_steps`.
pub fn check_iqc(
    spec: &IqcSpec,
    lambda: &[f64],
    p_trace: &[DVector<f64>],
    q_trace: &[DVector<f64>],
    n_steps: usize,
) -> Result<IqcCheck> {
    spec.validate()?;
    if p_trace.len() < n_steps + 1 || q_trace.len() < n_steps + 1 {
        return Err(contract("IQC traces must have at least N + 1 samples"));
    }
    let m = spec.multiplier(lambda)?;
    let mut psi = DVector::zeros(spec.n_psi());
    let mut sum = 0.0;
    let mut worst = f64::INFINITY;
    let mut weight = 1.0;
    let inv_rho2 = if spec.rho > 0.0 {
        1.0 / (spec.rho * spec.rho)
    } else {
        f64::INFINITY
    };
    for k in 0..=n_steps {
        let (p, q) = (&p_trace[k], &q_trace[k]);
        let r = &spec.c_psi * &psi + &spec.d_psi1 * p + &spec.d_psi2 * q;
        let term = (r.transpose() * &m * &r)[(0, 0)];
        // 0·∞ is taken as 0 so that ρ = 0 only weights nonzero terms.
        sum += if term == 0.0 { 0.0 } else { weight * term };
        worst = worst.min(sum);
        psi = &spec.a_psi * &psi + &spec.b_psi1 * p + &spec.b_psi2 * q;
        weight *= inv_rho2;
    }
    Ok(IqcCheck {
        holds: worst >= -1e-9,
        worst_partial_sum: worst,
    })
}
