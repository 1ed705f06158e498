//! Stability LMIs for the RNN feedback loop, certificates, initialization
//! and standalone verification.
//!
//! Block order of every LMI is `[ζ, q, z | ζ′, v]`; the nominal loop simply
//! has no q channel. In the sequential form the decision variables are
//! `(Q₁, Q₂, θ̃, λ)`; the direct form (θ̃ fixed) uses `(P, Λ, λ)` and is the
//! Schur complement of the un-relaxed Lyapunov condition.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conic::{
    solve_projection, Cone, CscMatrix, ProjectionProblem, SolveReport, SolveStatus,
    SolverSettings, WarmStart,
};
use crate::error::{contract, Error, Result};
use crate::iqc::{extend_system, sector_iqc, ExtendedSystem, IqcSpec};
use crate::matkit::{
    dare_gain, dlyap, min_eigenvalue, smat_of, spectral_radius, spd_inverse, svec_index,
    svec_len, svec_of, sym_eig, SymMatrix,
};
use crate::plants::{Environment, PlantLti, PlantModel, QuadraticReward};
use crate::rnnctl::{
    assemble_closed_loop, assemble_closed_loop_robust, Activation, ClosedLoop, ControllerDims,
    TransformedParams,
};
use crate::serde_mat;

/// The loop an LMI is stated on: a nominal plant, or a plant extended with
/// an IQC filter.
#[derive(Debug, Clone)]
pub enum LoopModel {
    Nominal(PlantLti),
    Robust {
        ext: ExtendedSystem,
        iqc: IqcSpec,
        /// State dimension of the plant part of the extended state.
        n_plant: usize,
    },
}

impl LoopModel {
    /// Model of the environment as seen by the controller (normalized
    /// outputs). Uncertain plants get the static sector IQC of their Δ.
    pub fn from_env(env: &Environment, rho: f64) -> Result<Self> {
        match env.synthesis_plant() {
            PlantModel::Lti(p) => Ok(LoopModel::Nominal(p)),
            PlantModel::Uncertain(p) => {
                let (a, b) = env
                    .delta_sector
                    .ok_or_else(|| contract("uncertain plant without a sector description"))?;
                let iqc = crate::iqc::sector_iqc_channels(p.n_q(), a, b, rho)?;
                let n_plant = p.n_state();
                Ok(LoopModel::Robust {
                    ext: extend_system(&p, &iqc)?,
                    iqc,
                    n_plant,
                })
            }
        }
    }

    pub fn robust(plant: &crate::plants::UncertainPlant, iqc: IqcSpec) -> Result<Self> {
        Ok(LoopModel::Robust {
            ext: extend_system(plant, &iqc)?,
            iqc,
            n_plant: plant.n_state(),
        })
    }

    pub fn is_robust(&self) -> bool {
        matches!(self, LoopModel::Robust { .. })
    }

    pub fn closed_loop(&self, theta: &TransformedParams) -> Result<ClosedLoop> {
        match self {
            LoopModel::Nominal(p) => assemble_closed_loop(theta, p),
            LoopModel::Robust { ext, .. } => assemble_closed_loop_robust(theta, ext),
        }
    }

    /// State dimension of the (extended) plant.
    pub fn n_state(&self) -> usize {
        match self {
            LoopModel::Nominal(p) => p.n_state(),
            LoopModel::Robust { ext, .. } => ext.n_state(),
        }
    }

    /// Number of original plant states (leading coordinates of the state).
    pub fn n_plant(&self) -> usize {
        match self {
            LoopModel::Nominal(p) => p.n_state(),
            LoopModel::Robust { n_plant, .. } => *n_plant,
        }
    }

    pub fn n_input(&self) -> usize {
        match self {
            LoopModel::Nominal(p) => p.n_input(),
            LoopModel::Robust { ext, .. } => ext.b_e2.ncols(),
        }
    }

    pub fn n_output(&self) -> usize {
        match self {
            LoopModel::Nominal(p) => p.n_output(),
            LoopModel::Robust { ext, .. } => ext.c_e2.nrows(),
        }
    }

    /// `(M_fixed, basis)` of the multiplier cone; empty for nominal loops.
    pub fn multipliers(&self) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        match self {
            LoopModel::Nominal(_) => (DMatrix::zeros(0, 0), Vec::new()),
            LoopModel::Robust { iqc, .. } => (iqc.m_fixed.clone(), iqc.m_basis.clone()),
        }
    }

    /// The nominal plant part `(A_G, B_G2, C_G2)`.
    pub fn plant_part(&self) -> PlantLti {
        match self {
            LoopModel::Nominal(p) => p.clone(),
            LoopModel::Robust { ext, n_plant, .. } => {
                let n = *n_plant;
                PlantLti {
                    a_g: ext.a_e.view((0, 0), (n, n)).into_owned(),
                    b_g: ext.b_e2.rows(0, n).into_owned(),
                    c_g: ext.c_e2.columns(0, n).into_owned(),
                }
            }
        }
    }

    /// SHA-256 over the shapes and bit patterns of every model matrix.
    pub fn hash(&self) -> String {
        let mats: Vec<&DMatrix<f64>> = match self {
            LoopModel::Nominal(p) => vec![&p.a_g, &p.b_g, &p.c_g],
            LoopModel::Robust { ext, iqc, .. } => {
                let mut v = vec![&ext.a_e, &ext.b_e1, &ext.b_e2, &ext.c_e1, &ext.d_e1, &ext.c_e2, &iqc.m_fixed];
                v.extend(iqc.m_basis.iter());
                v
            }
        };
        hash_matrices(&mats)
    }
}

pub fn hash_matrices(mats: &[&DMatrix<f64>]) -> String {
    let mut h = Sha256::new();
    for m in mats {
        h.update((m.nrows() as u64).to_le_bytes());
        h.update((m.ncols() as u64).to_le_bytes());
        for v in m.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn theta_hash(theta: &TransformedParams) -> String {
    let flat = theta.blocks.flatten();
    let mut h = Sha256::new();
    if let Ok(d) = theta.dims() {
        for n in [d.n_xi, d.n_phi, d.n_y, d.n_u] {
            h.update((n as u64).to_le_bytes());
        }
    }
    h.update(serde_json::to_string(&theta.activation).unwrap_or_default().as_bytes());
    for v in flat.iter().chain(&theta.sectors.alpha).chain(&theta.sectors.beta) {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// `H = [[𝒜, ℬ₁, ℬ₂], [𝒞₁, 𝒟₁, 𝒟₂]]`.
fn h_matrix(cl: &ClosedLoop) -> DMatrix<f64> {
    let (nz, nq, np) = (cl.n_zeta(), cl.n_q(), cl.n_phi());
    let mut h = DMatrix::zeros(nz + np, nz + nq + np);
    h.view_mut((0, 0), (nz, nz)).copy_from(&cl.a);
    h.view_mut((0, nz), (nz, nq)).copy_from(&cl.b1);
    h.view_mut((0, nz + nq), (nz, np)).copy_from(&cl.b2);
    h.view_mut((nz, 0), (np, nz)).copy_from(&cl.c1);
    h.view_mut((nz, nz), (np, nq)).copy_from(&cl.d1);
    h.view_mut((nz, nz + nq), (np, np)).copy_from(&cl.d2);
    h
}

/// `G = [𝒞₂, 𝒟₃, 𝒟₄]`.
fn g_matrix(cl: &ClosedLoop) -> DMatrix<f64> {
    let (nz, nq, np) = (cl.n_zeta(), cl.n_q(), cl.n_phi());
    let mut g = DMatrix::zeros(cl.n_r(), nz + nq + np);
    g.view_mut((0, 0), (cl.n_r(), nz)).copy_from(&cl.c2);
    g.view_mut((0, nz), (cl.n_r(), nq)).copy_from(&cl.d3);
    g.view_mut((0, nz + nq), (cl.n_r(), np)).copy_from(&cl.d4);
    g
}

/// Exact affine structure of θ̃ ↦ H(θ̃) for one loop model and controller
/// shape, plus the θ̃-independent data the LMIs need.
#[derive(Debug, Clone)]
pub struct ThetaMap {
    pub dims: ControllerDims,
    pub template: TransformedParams,
    pub n_zeta: usize,
    pub n_q: usize,
    pub h0: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub m_fixed: DMatrix<f64>,
    pub m_basis: Vec<DMatrix<f64>>,
    /// Nonzero entries of `H(eᵢ) − H(0)` for each flat parameter index.
    pub columns: Vec<Vec<(usize, usize, f64)>>,
    pub model_hash: String,
}

impl ThetaMap {
    pub fn new(model: &LoopModel, template: &TransformedParams) -> Result<Self> {
        let dims = template.dims()?;
        let zero = template.with_flat(&vec![0.0; dims.n_params()])?;
        let cl0 = model.closed_loop(&zero)?;
        let h0 = h_matrix(&cl0);
        let mut columns = Vec::with_capacity(dims.n_params());
        let mut flat = vec![0.0; dims.n_params()];
        for i in 0..dims.n_params() {
            flat[i] = 1.0;
            let hi = h_matrix(&model.closed_loop(&zero.with_flat(&flat)?)?);
            flat[i] = 0.0;
            let mut col = Vec::new();
            for c in 0..hi.ncols() {
                for r in 0..hi.nrows() {
                    let d = hi[(r, c)] - h0[(r, c)];
                    if d != 0.0 {
                        col.push((r, c, d));
                    }
                }
            }
            columns.push(col);
        }
        let (m_fixed, m_basis) = model.multipliers();
        Ok(Self {
            dims,
            template: zero,
            n_zeta: cl0.n_zeta(),
            n_q: cl0.n_q(),
            h0,
            g: g_matrix(&cl0),
            m_fixed,
            m_basis,
            columns,
            model_hash: model.hash(),
        })
    }

    pub fn n_phi(&self) -> usize {
        self.dims.n_phi
    }

    pub fn n_theta(&self) -> usize {
        self.columns.len()
    }

    pub fn h_of(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut h = self.h0.clone();
        for (col, &t) in self.columns.iter().zip(theta) {
            if t != 0.0 {
                for &(r, c, v) in col {
                    h[(r, c)] += v * t;
                }
            }
        }
        h
    }

    pub fn params(&self, theta: &[f64]) -> Result<TransformedParams> {
        self.template.with_flat(theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LmiForm {
    /// Linearized around (P̄, Λ̄); variables (Q₁, Q₂, θ̃, λ).
    Sequential,
    /// θ̃ fixed; variables (P, Λ, λ).
    Direct,
}

/// Decision-variable layout: `[svec(Q₁) | diag(Q₂) | θ̃ | λ]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarLayout {
    pub n_zeta: usize,
    pub n_phi: usize,
    pub n_theta: usize,
    pub n_mult: usize,
}

impl VarLayout {
    pub fn n_q1(&self) -> usize {
        svec_len(self.n_zeta)
    }
    pub fn q2_offset(&self) -> usize {
        self.n_q1()
    }
    pub fn theta_offset(&self) -> usize {
        self.q2_offset() + self.n_phi
    }
    pub fn lambda_offset(&self) -> usize {
        self.theta_offset() + self.n_theta
    }
    pub fn n_vars(&self) -> usize {
        self.lambda_offset() + self.n_mult
    }
}

/// A point in decision-variable space. In the direct form `q1`/`q2` hold
/// P and diag(Λ).
#[derive(Debug, Clone, PartialEq)]
pub struct LmiPoint {
    pub q1: DMatrix<f64>,
    pub q2: DVector<f64>,
    pub theta: DVector<f64>,
    pub lambda: DVector<f64>,
}

/// `LMI(x) = constant + Σ xₖ termₖ`; terms are stored as upper-triangular
/// entries of symmetric matrices.
#[derive(Debug, Clone)]
pub struct LmiInstance {
    pub form: LmiForm,
    pub layout: VarLayout,
    pub rho: f64,
    pub p_bar: Option<DMatrix<f64>>,
    pub lambda_bar: Option<DVector<f64>>,
    /// Lower bound used for Q₁ ⪰ εI and diag(Q₂) ≥ ε.
    pub epsilon: f64,
    pub dim: usize,
    /// Size of the `[ζ, q, z]` block.
    pub n_left: usize,
    pub constant: DMatrix<f64>,
    pub terms: Vec<Vec<(usize, usize, f64)>>,
    /// θ̃ used when it is not a decision variable.
    pub theta_fixed: Option<DVector<f64>>,
}

fn push_sym(term: &mut Vec<(usize, usize, f64)>, r: usize, c: usize, v: f64) {
    if v != 0.0 {
        let (r, c) = if r <= c { (r, c) } else { (c, r) };
        term.push((r, c, v));
    }
}

/// Symmetric basis matrix of the k-th svec coordinate: `E_ii` or
/// `(E_ij + E_ji)/√2`.
fn svec_basis_pair(k: usize) -> (usize, usize, f64) {
    // Invert k = j(j+1)/2 + i.
    let mut j = ((((8 * k + 1) as f64).sqrt() - 1.0) / 2.0) as usize;
    while j * (j + 1) / 2 > k {
        j -= 1;
    }
    while (j + 1) * (j + 2) / 2 <= k {
        j += 1;
    }
    let i = k - j * (j + 1) / 2;
    let w = if i == j { 1.0 } else { std::f64::consts::FRAC_1_SQRT_2 };
    (i, j, w)
}

/// `−Gᵀ M G` contribution to the `[ζ, q, z]` block.
fn minus_gtmg(g: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    if g.nrows() == 0 {
        return DMatrix::zeros(g.ncols(), g.ncols());
    }
    -(g.transpose() * m * g)
}

/// Lower bound ε for `Q₁ ⪰ εI` and `diag(Q₂) ≥ ε`: small relative to the
/// target's trace, and never above 1% of its smallest eigenvalue, so the
/// target's own (Q₁, Q₂) stays admissible.
pub fn default_epsilon(target_q1: &DMatrix<f64>, target_q2: &DVector<f64>) -> f64 {
    let n = target_q1.nrows().max(1) as f64;
    let mut eps = 1e-6 * (target_q1.trace() / n).max(1.0);
    if let Ok(lo) = min_eigenvalue(&crate::matkit::symmetrize(target_q1)) {
        if lo > 0.0 {
            eps = eps.min(1e-2 * lo);
        }
    }
    for &v in target_q2.iter() {
        if v > 0.0 {
            eps = eps.min(1e-2 * v);
        }
    }
    eps
}

/// θ̃ as a decision variable or frozen at given values.
#[derive(Debug, Clone)]
pub enum ThetaMode {
    Free,
    Fixed(DVector<f64>),
}

/// Sequentially convexified LMI around (P̄, Λ̄).
pub fn assemble_sequential(
    map: &ThetaMap,
    p_bar: &DMatrix<f64>,
    lambda_bar: &DVector<f64>,
    rho: f64,
    theta: ThetaMode,
    epsilon: f64,
) -> Result<LmiInstance> {
    let nz = map.n_zeta;
    let nq = map.n_q;
    let np = map.n_phi();
    if p_bar.shape() != (nz, nz) {
        return Err(contract(format!("P̄ must be {nz}×{nz}")));
    }
    if lambda_bar.len() != np {
        return Err(contract(format!("Λ̄ must have {np} diagonal entries")));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(contract(format!("rho must lie in [0, 1], got {rho}")));
    }
    let p_bar = crate::matkit::symmetrize(p_bar);
    let n_left = nz + nq + np;
    let dim = n_left + nz + np;
    let (n_theta, theta_fixed) = match &theta {
        ThetaMode::Free => (map.n_theta(), None),
        ThetaMode::Fixed(t) => {
            if t.len() != map.n_theta() {
                return Err(contract("fixed θ̃ has the wrong length"));
            }
            (0, Some(t.clone()))
        }
    };
    let layout = VarLayout {
        n_zeta: nz,
        n_phi: np,
        n_theta,
        n_mult: map.m_basis.len(),
    };

    let mut constant = DMatrix::zeros(dim, dim);
    let rho2 = rho * rho;
    constant
        .view_mut((0, 0), (nz, nz))
        .copy_from(&(&p_bar * (2.0 * rho2)));
    for i in 0..np {
        constant[(nz + nq + i, nz + nq + i)] = 2.0 * lambda_bar[i];
    }
    let gmg = minus_gtmg(&map.g, &map.m_fixed);
    let mut tl = constant.view((0, 0), (n_left, n_left)).into_owned();
    tl += gmg;
    constant.view_mut((0, 0), (n_left, n_left)).copy_from(&tl);
    let h = match &theta_fixed {
        Some(t) => map.h_of(t.as_slice()),
        None => map.h0.clone(),
    };
    constant
        .view_mut((n_left, 0), (nz + np, n_left))
        .copy_from(&h);
    constant
        .view_mut((0, n_left), (n_left, nz + np))
        .copy_from(&h.transpose());

    let mut terms = Vec::with_capacity(layout.n_vars());
    // Q₁: −ρ² P̄ Bₖ P̄ in ζζ and Bₖ in ζ′ζ′.
    for k in 0..layout.n_q1() {
        let (i, j, w) = svec_basis_pair(k);
        let mut t = Vec::new();
        if rho2 != 0.0 {
            let pi = p_bar.column(i);
            let pj = p_bar.column(j);
            for c in 0..nz {
                for r in 0..=c {
                    let v = if i == j {
                        pi[r] * pi[c]
                    } else {
                        w * (pi[r] * pj[c] + pj[r] * pi[c])
                    };
                    push_sym(&mut t, r, c, -rho2 * v);
                }
            }
        }
        push_sym(&mut t, n_left + i, n_left + j, w);
        terms.push(t);
    }
    // Q₂: −Λ̄ᵢ² in zz and 1 in vv.
    for i in 0..np {
        let mut t = Vec::new();
        push_sym(&mut t, nz + nq + i, nz + nq + i, -lambda_bar[i] * lambda_bar[i]);
        push_sym(&mut t, n_left + nz + i, n_left + nz + i, 1.0);
        terms.push(t);
    }
    if theta_fixed.is_none() {
        for col in &map.columns {
            let t = col
                .iter()
                .map(|&(r, c, v)| (c, n_left + r, v))
                .collect();
            terms.push(t);
        }
    }
    for m in &map.m_basis {
        terms.push(dense_upper(&minus_gtmg(&map.g, m), 0));
    }

    Ok(LmiInstance {
        form: LmiForm::Sequential,
        layout,
        rho,
        p_bar: Some(p_bar),
        lambda_bar: Some(lambda_bar.clone()),
        epsilon,
        dim,
        n_left,
        constant,
        terms,
        theta_fixed,
    })
}

fn dense_upper(m: &DMatrix<f64>, offset: usize) -> Vec<(usize, usize, f64)> {
    let mut t = Vec::new();
    for c in 0..m.ncols() {
        for r in 0..=c {
            push_sym(&mut t, offset + r, offset + c, m[(r, c)]);
        }
    }
    t
}

/// Nominal-loop sequential LMI.
pub fn assemble_nominal(
    map: &ThetaMap,
    p_bar: &DMatrix<f64>,
    lambda_bar: &DVector<f64>,
    rho: f64,
    theta: ThetaMode,
    epsilon: f64,
) -> Result<LmiInstance> {
    if map.n_q != 0 {
        return Err(contract("assemble_nominal called on a loop with uncertainty channels"));
    }
    assemble_sequential(map, p_bar, lambda_bar, rho, theta, epsilon)
}

/// Robust (IQC) sequential LMI.
pub fn assemble_robust(
    map: &ThetaMap,
    p_bar: &DMatrix<f64>,
    lambda_bar: &DVector<f64>,
    rho: f64,
    theta: ThetaMode,
    epsilon: f64,
) -> Result<LmiInstance> {
    assemble_sequential(map, p_bar, lambda_bar, rho, theta, epsilon)
}

/// Direct LMI in (P, Λ, λ) for fixed θ̃:
/// `[[diag(ρ²P, 0, Λ) − GᵀMG, HᵀW], [WH, W]] ⪰ 0`, `W = diag(P, Λ)`.
pub fn assemble_direct(
    map: &ThetaMap,
    theta: &DVector<f64>,
    rho: f64,
    epsilon: f64,
) -> Result<LmiInstance> {
    let nz = map.n_zeta;
    let nq = map.n_q;
    let np = map.n_phi();
    let n_left = nz + nq + np;
    let dim = n_left + nz + np;
    let layout = VarLayout {
        n_zeta: nz,
        n_phi: np,
        n_theta: 0,
        n_mult: map.m_basis.len(),
    };
    let h = map.h_of(theta.as_slice());
    let mut constant = DMatrix::zeros(dim, dim);
    let gmg = minus_gtmg(&map.g, &map.m_fixed);
    constant.view_mut((0, 0), (n_left, n_left)).copy_from(&gmg);

    let rho2 = rho * rho;
    let mut terms = Vec::with_capacity(layout.n_vars());
    for k in 0..layout.n_q1() {
        let (i, j, w) = svec_basis_pair(k);
        let mut t = Vec::new();
        push_sym(&mut t, i, j, rho2 * w);
        push_sym(&mut t, n_left + i, n_left + j, w);
        // Rows i and j of W·H.
        for c in 0..n_left {
            if i == j {
                push_sym(&mut t, c, n_left + i, h[(i, c)]);
            } else {
                push_sym(&mut t, c, n_left + i, w * h[(j, c)]);
                push_sym(&mut t, c, n_left + j, w * h[(i, c)]);
            }
        }
        terms.push(t);
    }
    for i in 0..np {
        let mut t = Vec::new();
        push_sym(&mut t, nz + nq + i, nz + nq + i, 1.0);
        push_sym(&mut t, n_left + nz + i, n_left + nz + i, 1.0);
        for c in 0..n_left {
            push_sym(&mut t, c, n_left + nz + i, h[(nz + i, c)]);
        }
        terms.push(t);
    }
    for m in &map.m_basis {
        terms.push(dense_upper(&minus_gtmg(&map.g, m), 0));
    }
    Ok(LmiInstance {
        form: LmiForm::Direct,
        layout,
        rho,
        p_bar: None,
        lambda_bar: None,
        epsilon,
        dim,
        n_left,
        constant,
        terms,
        theta_fixed: Some(theta.clone()),
    })
}

impl LmiInstance {
    pub fn point_to_vec(&self, p: &LmiPoint) -> Result<Vec<f64>> {
        let l = &self.layout;
        if p.q1.shape() != (l.n_zeta, l.n_zeta)
            || p.q2.len() != l.n_phi
            || p.lambda.len() != l.n_mult
            || (l.n_theta > 0 && p.theta.len() != l.n_theta)
        {
            return Err(contract("LMI point does not match the variable layout"));
        }
        let mut x = svec_of(&crate::matkit::symmetrize(&p.q1));
        x.extend(p.q2.iter());
        if l.n_theta > 0 {
            x.extend(p.theta.iter());
        }
        x.extend(p.lambda.iter());
        Ok(x)
    }

    pub fn point_from_vec(&self, x: &[f64]) -> LmiPoint {
        let l = &self.layout;
        let theta = if l.n_theta > 0 {
            DVector::from_column_slice(&x[l.theta_offset()..l.lambda_offset()])
        } else {
            self.theta_fixed.clone().unwrap_or_else(|| DVector::zeros(0))
        };
        LmiPoint {
            q1: smat_of(&x[..l.n_q1()], l.n_zeta),
            q2: DVector::from_column_slice(&x[l.q2_offset()..l.theta_offset()]),
            theta,
            lambda: DVector::from_column_slice(&x[l.lambda_offset()..]),
        }
    }

    pub fn evaluate_vec(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        // Constant is full; add terms into the upper triangle then mirror.
        let mut upper = DMatrix::<f64>::zeros(self.dim, self.dim);
        for (t, &xk) in self.terms.iter().zip(x) {
            if xk == 0.0 {
                continue;
            }
            for &(r, c, v) in t {
                upper[(r, c)] += v * xk;
            }
        }
        for c in 0..self.dim {
            for r in 0..c {
                let v = upper[(r, c)];
                m[(r, c)] += v;
                m[(c, r)] += v;
            }
            m[(c, c)] += upper[(c, c)];
        }
        m
    }

    pub fn evaluate(&self, p: &LmiPoint) -> Result<DMatrix<f64>> {
        Ok(self.evaluate_vec(&self.point_to_vec(p)?))
    }

    /// Diagonal block boundaries `[ζ, q, z, ζ′, v]`, empty blocks dropped.
    fn blocks(&self) -> Vec<(usize, usize)> {
        let l = &self.layout;
        let nq = self.n_left - l.n_zeta - l.n_phi;
        let sizes = [l.n_zeta, nq, l.n_phi, l.n_zeta, l.n_phi];
        let mut out = Vec::new();
        let mut start = 0;
        for n in sizes {
            if n > 0 {
                out.push((start, n));
            }
            start += n;
        }
        out
    }

    /// Block-diagonal congruence `W` with `W Lᵦᵦ Wᵀ ≈ I` for every diagonal
    /// block of the LMI at `reference`. Scaling by `W` leaves the feasible
    /// set unchanged and keeps ADMM well conditioned when P̄ is not.
    fn congruence(&self, reference: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        let m = self.evaluate_vec(reference);
        let mut ws = Vec::new();
        for (start, n) in self.blocks() {
            let b = crate::matkit::symmetrize(&m.view((start, start), (n, n)).into_owned());
            let eig = sym_eig(&SymMatrix::new(b)?)?;
            let top = eig.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if !(top > 0.0) || !top.is_finite() {
                ws.push(DMatrix::identity(n, n));
                continue;
            }
            let floor = 1e-8 * top;
            let d = eig.values.map(|v| 1.0 / v.abs().max(floor).sqrt());
            ws.push(&eig.vectors * DMatrix::from_diagonal(&d) * eig.vectors.transpose());
        }
        Ok(ws)
    }

    /// svec of `W T Wᵀ` for a sparse symmetric term, touching only the
    /// block pairs the term occupies.
    fn scaled_term(
        &self,
        term: &[(usize, usize, f64)],
        blocks: &[(usize, usize)],
        ws: &[DMatrix<f64>],
        block_of: &[usize],
    ) -> Vec<(usize, f64)> {
        use std::collections::BTreeMap;
        let mut pairs: BTreeMap<(usize, usize), DMatrix<f64>> = BTreeMap::new();
        for &(r, c, v) in term {
            let (bi, bj) = (block_of[r], block_of[c]);
            let (si, ni) = blocks[bi];
            let (sj, nj) = blocks[bj];
            let e = pairs.entry((bi, bj)).or_insert_with(|| DMatrix::zeros(ni, nj));
            e[(r - si, c - sj)] += v;
            if bi == bj && r != c {
                e[(c - si, r - sj)] += v;
            }
        }
        let mut out = Vec::new();
        for ((bi, bj), sub) in pairs {
            let (si, ni) = blocks[bi];
            let (sj, nj) = blocks[bj];
            let t = &ws[bi] * sub * ws[bj].transpose();
            for cc in 0..nj {
                for rr in 0..ni {
                    let (r, c) = (si + rr, sj + cc);
                    if bi == bj && r > c {
                        continue;
                    }
                    let v = t[(rr, cc)];
                    if v != 0.0 {
                        let w = if r == c { v } else { v * std::f64::consts::SQRT_2 };
                        out.push((svec_index(r.min(c), r.max(c)), w));
                    }
                }
            }
        }
        out.sort_by_key(|e| e.0);
        out
    }

    /// Constraint map `x ↦ [svec(W(LMI(x) − τW⁻¹W⁻ᵀ)Wᵀ) , svec(Q₁ − εI),
    /// diag(Q₂) − ε, λ]` where `W` is the congruence built at the target.
    pub fn projection_problem(&self, target: &LmiPoint, margin: f64) -> Result<ProjectionProblem> {
        let l = self.layout;
        let n_lmi = svec_len(self.dim);
        let n_rows = n_lmi + l.n_q1() + l.n_phi + l.n_mult;
        let target_vec = self.point_to_vec(target)?;
        let blocks = self.blocks();
        let ws = self.congruence(&target_vec)?;
        let mut block_of = vec![0; self.dim];
        for (b, &(start, n)) in blocks.iter().enumerate() {
            block_of[start..start + n].iter_mut().for_each(|v| *v = b);
        }
        let mut columns: Vec<Vec<(usize, f64)>> = Vec::with_capacity(l.n_vars());
        for (k, t) in self.terms.iter().enumerate() {
            let mut col = self.scaled_term(t, &blocks, &ws, &block_of);
            if k < l.n_q1() {
                col.push((n_lmi + k, 1.0));
            } else if k < l.theta_offset() {
                col.push((n_lmi + l.n_q1() + (k - l.q2_offset()), 1.0));
            } else if k >= l.lambda_offset() {
                col.push((n_lmi + l.n_q1() + l.n_phi + (k - l.lambda_offset()), 1.0));
            }
            columns.push(col);
        }
        let a = CscMatrix::from_columns(n_rows, columns)?;
        let mut w = DMatrix::zeros(self.dim, self.dim);
        for (&(start, n), wb) in blocks.iter().zip(&ws) {
            w.view_mut((start, start), (n, n)).copy_from(wb);
        }
        let mut shifted = &w * &self.constant * w.transpose();
        for i in 0..self.dim {
            shifted[(i, i)] -= margin;
        }
        let mut c = svec_of(&crate::matkit::symmetrize(&shifted));
        c.extend(svec_of(&(DMatrix::identity(l.n_zeta, l.n_zeta) * -self.epsilon)));
        c.extend(std::iter::repeat(-self.epsilon).take(l.n_phi));
        c.extend(std::iter::repeat(0.0).take(l.n_mult));
        let cones = vec![
            Cone::Psd(self.dim),
            Cone::Psd(l.n_zeta),
            Cone::NonNeg(l.n_phi),
            Cone::NonNeg(l.n_mult),
        ];
        Ok(ProjectionProblem {
            a,
            c,
            cones,
            target: target_vec,
        })
    }

    /// Feasibility diagnostics of a point.
    pub fn check_point(&self, p: &LmiPoint) -> Result<PointCheck> {
        Ok(PointCheck {
            min_eig: min_eig_residual(self, p)?,
            q1_min_eig: min_eigenvalue(&crate::matkit::symmetrize(&p.q1))?,
            q2_min: p.q2.iter().copied().fold(f64::INFINITY, f64::min),
            lambda_min: p.lambda.iter().copied().fold(f64::INFINITY, f64::min),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointCheck {
    pub min_eig: f64,
    pub q1_min_eig: f64,
    pub q2_min: f64,
    pub lambda_min: f64,
}

impl PointCheck {
    /// Strict acceptance used by the solver wrapper.
    fn accepted(&self, epsilon: f64) -> bool {
        self.accepted_above(epsilon, 0.0)
    }

    /// As [`Self::accepted`] with the LMI eigenvalue bound lowered to `floor`.
    fn accepted_above(&self, epsilon: f64, floor: f64) -> bool {
        self.min_eig >= floor
            && self.q1_min_eig >= 0.5 * epsilon
            && (self.q2_min.is_infinite() || self.q2_min >= 0.5 * epsilon)
            && (self.lambda_min.is_infinite() || self.lambda_min >= 0.0)
    }
}

/// Minimum eigenvalue of the assembled LMI at a point.
pub fn min_eig_residual(instance: &LmiInstance, p: &LmiPoint) -> Result<f64> {
    min_eigenvalue(&instance.evaluate(p)?)
}

/// Un-relaxed Lyapunov/IQC condition
/// `[𝒜 ℬ₁ ℬ₂]ᵀP[·] − diag(ρ²P,0,0) + [𝒞₁ 𝒟₁ 𝒟₂]ᵀΛ[·] − diag(0,0,Λ) + GᵀMG`,
/// which must be negative semidefinite for a certificate.
pub fn lyapunov_condition(
    cl: &ClosedLoop,
    p: &DMatrix<f64>,
    lambda: &DVector<f64>,
    m: &DMatrix<f64>,
    rho: f64,
) -> DMatrix<f64> {
    let h = h_matrix(cl);
    let (nz, nq, np) = (cl.n_zeta(), cl.n_q(), cl.n_phi());
    let top = h.rows(0, nz).into_owned();
    let bot = h.rows(nz, np).into_owned();
    let lam = DMatrix::from_diagonal(lambda);
    let mut out = top.transpose() * p * &top + bot.transpose() * &lam * &bot;
    let mut tl = out.view((0, 0), (nz, nz)).into_owned();
    tl -= p * (rho * rho);
    out.view_mut((0, 0), (nz, nz)).copy_from(&tl);
    for i in 0..np {
        out[(nz + nq + i, nz + nq + i)] -= lambda[i];
    }
    if cl.n_r() > 0 {
        let g = g_matrix(cl);
        out += g.transpose() * m * &g;
    }
    crate::matkit::symmetrize(&out)
}

/// Options for [`solve_lmi`].
#[derive(Debug, Clone)]
pub struct LmiSolveOptions {
    pub settings: SolverSettings,
    /// Initial shift τ in `LMI(x) ⪰ τI`.
    pub margin: f64,
    /// A point known to be feasible for the instance; used to repair an
    /// ADMM iterate that misses feasibility by a small amount.
    pub fallback: Option<LmiPoint>,
}

impl Default for LmiSolveOptions {
    fn default() -> Self {
        Self {
            settings: SolverSettings::default(),
            margin: 1e-6,
            fallback: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmiSolution {
    pub point: LmiPoint,
    pub report: SolveReport,
    pub check: PointCheck,
    pub warm: WarmStart,
    /// Weight of the fallback point in the accepted convex combination.
    pub repair_weight: f64,
}

fn sanitize(p: &mut LmiPoint) {
    p.lambda.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Projects `target` onto the feasible set of `instance` and certifies the
/// result by an eigenvalue check.
pub fn solve_lmi(
    instance: &LmiInstance,
    target: &LmiPoint,
    warm: Option<&WarmStart>,
    opts: &LmiSolveOptions,
) -> Result<LmiSolution> {
    let mut clean = target.clone();
    sanitize(&mut clean);
    let check = instance.check_point(&clean)?;
    if clean == *target && check.accepted(instance.epsilon) {
        // The target is its own projection.
        return Ok(LmiSolution {
            point: clean,
            report: SolveReport {
                status: SolveStatus::Optimal,
                iterations: 0,
                primal_residual: 0.0,
                dual_residual: 0.0,
                kkt_residual: 0.0,
                objective: 0.0,
                sigma: opts.settings.sigma_init,
                refactorizations: 0,
                eps_abs: opts.settings.eps_abs,
                eps_rel: opts.settings.eps_rel,
                max_iter: opts.settings.max_iter,
                seconds: 0.0,
            },
            check,
            warm: warm.cloned().unwrap_or(WarmStart {
                x: Vec::new(),
                s: Vec::new(),
                y: Vec::new(),
                sigma: opts.settings.sigma_init,
            }),
            repair_weight: 0.0,
        });
    }
    let mut margin = opts.margin;
    let mut warm = warm.cloned();
    let mut last = None;
    for _ in 0..3 {
        let problem = instance.projection_problem(target, margin)?;
        let sol = solve_projection(&problem, &opts.settings, warm.as_ref())?;
        let mut point = instance.point_from_vec(&sol.x);
        sanitize(&mut point);
        let check = instance.check_point(&point)?;
        let ws = sol.warm_start();
        if check.accepted(instance.epsilon) {
            return Ok(LmiSolution {
                point,
                report: sol.report,
                check,
                warm: ws,
                repair_weight: 0.0,
            });
        }
        let converged = sol.report.status == SolveStatus::Optimal;
        last = Some((point, sol.report, check, ws.clone()));
        if !converged {
            break;
        }
        margin += 2.0 * (-check.min_eig).max(0.0) + margin;
        warm = Some(ws);
    }
    let (point, report, check, ws) = last.expect("at least one attempt");
    if let Some(fb) = &opts.fallback {
        // The fallback is feasible in exact arithmetic; re-linearizing at a
        // badly conditioned Q₁ can cost it up to the recursive-feasibility
        // tolerance, which the repair then inherits.
        let fb_check = instance.check_point(fb)?;
        let floor = fb_check.min_eig.min(0.0);
        if floor >= -RECURSIVE_FEASIBILITY_TOL && fb_check.accepted_above(instance.epsilon, floor) {
            let (mut lo, mut hi) = (0.0, 1.0);
            let mix = |t: f64| LmiPoint {
                q1: &point.q1 * (1.0 - t) + &fb.q1 * t,
                q2: &point.q2 * (1.0 - t) + &fb.q2 * t,
                theta: &point.theta * (1.0 - t) + &fb.theta * t,
                lambda: &point.lambda * (1.0 - t) + &fb.lambda * t,
            };
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if instance.check_point(&mix(mid))?.accepted_above(instance.epsilon, floor) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let repaired = mix(hi);
            let check = instance.check_point(&repaired)?;
            return Ok(LmiSolution {
                point: repaired,
                report,
                check,
                warm: ws,
                repair_weight: hi,
            });
        }
    }
    Err(Error::Projection(format!(
        "no certified point: status {:?}, min eigenvalue {:.3e}, primal residual {:.3e}, {} iterations",
        report.status, check.min_eig, report.primal_residual, report.iterations
    )))
}

/// Slack allowed when a previous solution is evaluated at the instance
/// linearized around it.
pub const RECURSIVE_FEASIBILITY_TOL: f64 = 1e-7;

/// Stability certificate `V(ζ) = ζᵀPζ` with rate ρ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub rho: f64,
    #[serde(rename = "P", with = "serde_mat::matrix")]
    pub p: DMatrix<f64>,
    /// Diagonal of Λ.
    #[serde(rename = "Lambda")]
    pub lambda: Vec<f64>,
    #[serde(rename = "M_coords")]
    pub m_coords: Vec<f64>,
    #[serde(rename = "cond_P")]
    pub cond_p: f64,
    pub epsilon: f64,
    pub min_eig_residual: f64,
    pub plant_hash: String,
    pub theta_hash: String,
}

impl Certificate {
    /// Decay envelope coefficient √cond(P).
    pub fn envelope(&self) -> f64 {
        self.cond_p.sqrt()
    }

    pub fn from_point(
        instance: &LmiInstance,
        point: &LmiPoint,
        model: &LoopModel,
        theta: &TransformedParams,
    ) -> Result<Self> {
        let (p, lambda) = match instance.form {
            LmiForm::Sequential => (
                spd_inverse(&SymMatrix::new(point.q1.clone())?)?.into_inner(),
                point.q2.map(|v| 1.0 / v),
            ),
            LmiForm::Direct => (point.q1.clone(), point.q2.clone()),
        };
        let eig = sym_eig(&SymMatrix::new(p.clone())?)?;
        let lo = eig.values[0];
        let hi = eig.values[eig.values.len() - 1];
        if !(lo > 0.0) {
            return Err(Error::SolverFailure("certificate P is not positive definite".into()));
        }
        Ok(Self {
            rho: instance.rho,
            p: crate::matkit::symmetrize(&p),
            lambda: lambda.iter().copied().collect(),
            m_coords: point.lambda.iter().copied().collect(),
            cond_p: hi / lo,
            epsilon: instance.epsilon,
            min_eig_residual: min_eig_residual(instance, point)?,
            plant_hash: model.hash(),
            theta_hash: theta_hash(theta),
        })
    }

    /// Checks the un-relaxed condition for this certificate and controller;
    /// returns the largest eigenvalue (≤ 0 up to round-off when valid).
    pub fn condition_max_eig(&self, model: &LoopModel, theta: &TransformedParams) -> Result<f64> {
        let cl = model.closed_loop(theta)?;
        let (m_fixed, basis) = model.multipliers();
        let mut m = m_fixed;
        for (b, l) in basis.iter().zip(&self.m_coords) {
            m += b * *l;
        }
        let f = lyapunov_condition(&cl, &self.p, &DVector::from_column_slice(&self.lambda), &m, self.rho);
        Ok(-min_eigenvalue(&(-f))?)
    }
}

/// Result of initialization: a certified starting controller and the point
/// that is feasible for the `(P⁰, Λ⁰)` instance.
#[derive(Debug, Clone)]
pub struct InitialCertificate {
    pub p0: DMatrix<f64>,
    pub lambda0: DVector<f64>,
    pub theta0: TransformedParams,
    pub point: LmiPoint,
    pub certificate: Certificate,
    pub bootstrap_rounds: usize,
}

fn init_err(stage: &str, e: impl std::fmt::Display) -> Error {
    Error::Initialization {
        stage: stage.into(),
        details: e.to_string(),
    }
}

/// Weights of the two Riccati designs behind [`observer_controller`].
#[derive(Debug, Clone)]
pub struct ObserverWeights {
    pub q_ctrl: SymMatrix,
    pub r_ctrl: SymMatrix,
    pub q_obs: SymMatrix,
    pub r_obs: SymMatrix,
}

impl ObserverWeights {
    pub fn identity(plant: &PlantLti) -> Self {
        Self {
            q_ctrl: SymMatrix::identity(plant.n_state()),
            r_ctrl: SymMatrix::identity(plant.n_input()),
            q_obs: SymMatrix::identity(plant.n_state()),
            r_obs: SymMatrix::identity(plant.n_output()),
        }
    }

    /// Regulator weights taken from a quadratic reward (magnitudes of the
    /// state and control weights) with a fast observer, `Q_o = I`, `R_o = 0.01 I`.
    pub fn from_reward(plant: &PlantLti, reward: &QuadraticReward) -> Result<Self> {
        let n = plant.n_state();
        let m = plant.n_input();
        if reward.state_weights.len() != n || reward.control_weights.len() != m {
            return Err(contract("reward weights do not match the plant"));
        }
        let floor = |v: f64| v.abs().max(1e-6);
        let q = DVector::from_iterator(n, reward.state_weights.iter().map(|&v| floor(v)));
        let r = DVector::from_iterator(m, reward.control_weights.iter().map(|&v| floor(v)));
        Ok(Self {
            q_ctrl: SymMatrix::new(DMatrix::from_diagonal(&q))?,
            r_ctrl: SymMatrix::new(DMatrix::from_diagonal(&r))?,
            q_obs: SymMatrix::identity(n),
            r_obs: SymMatrix::new(DMatrix::identity(plant.n_output(), plant.n_output()) * 0.01)?,
        })
    }
}

/// Observer-based output feedback embedded in the first `n_G` controller
/// states: `Ã = [[A − BK − LC, 0], [0, 0]]`, `B̃_K2 = [L; 0]`, `C̃_K1 = [−K, 0]`.
/// Gains come from Riccati equations on the plant scaled by `1/ρ_d`, so that
/// every closed-loop eigenvalue has modulus below `ρ_d`.
pub fn observer_controller(
    plant: &PlantLti,
    dims: ControllerDims,
    activation: Activation,
    rho_d: f64,
    weights: &ObserverWeights,
) -> Result<TransformedParams> {
    let n = plant.n_state();
    if dims.n_xi < n {
        return Err(contract(format!(
            "observer design needs n_xi >= {n} plant states, got {}",
            dims.n_xi
        )));
    }
    if dims.n_u != plant.n_input() || dims.n_y != plant.n_output() {
        return Err(contract("controller dimensions do not match the plant"));
    }
    if !(rho_d > 0.0) {
        return Err(contract("design rate must be positive"));
    }
    let a = &plant.a_g / rho_d;
    let k = dare_gain(&a, &plant.b_g, &weights.q_ctrl, &weights.r_ctrl)?.gain * rho_d;
    let lt = dare_gain(&a.transpose(), &plant.c_g.transpose(), &weights.q_obs, &weights.r_obs)?
        .gain
        * rho_d;
    let l = lt.transpose();
    let mut theta = TransformedParams::zeros(dims, activation)?;
    let core = &plant.a_g - &plant.b_g * &k - &l * &plant.c_g;
    theta.blocks.a_k.view_mut((0, 0), (n, n)).copy_from(&core);
    theta.blocks.b_k2.rows_mut(0, n).copy_from(&l);
    theta.blocks.c_k1.columns_mut(0, n).copy_from(&(-k));
    Ok(theta)
}

/// Scales a positive definite matrix so that `λ_min · λ_max = 1`.
pub fn normalize_spd(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = sym_eig(&SymMatrix::new(p.clone())?)?;
    let lo = eig.values[0];
    let hi = eig.values[eig.values.len() - 1];
    if !(lo > 0.0) {
        return Err(Error::SolverFailure("matrix is not positive definite".into()));
    }
    Ok(p / (lo * hi).sqrt())
}

/// Lyapunov matrix of `𝒜/ρ`, normalized; fails if `𝒜` is not ρ-stable.
fn lyapunov_seed(cl: &ClosedLoop, rho: f64) -> Result<DMatrix<f64>> {
    let rad = spectral_radius(&cl.a)?;
    if !(rad < rho) {
        return Err(Error::Unstable(format!(
            "closed-loop spectral radius {rad:.6} is not below rho = {rho}"
        )));
    }
    let p = dlyap(&(&cl.a / rho), &SymMatrix::identity(cl.n_zeta()))?;
    normalize_spd(p.as_matrix())
}

/// Solves the direct LMI for fixed θ̃ with a proximal objective toward the
/// Lyapunov seed; returns `(P, Λ, λ)`.
fn direct_certificate(
    map: &ThetaMap,
    theta: &DVector<f64>,
    rho: f64,
    p_seed: &DMatrix<f64>,
    opts: &LmiSolveOptions,
) -> Result<(LmiInstance, LmiSolution)> {
    let eps = default_epsilon(p_seed, &DVector::from_element(map.n_phi(), 1.0));
    let inst = assemble_direct(map, theta, rho, eps)?;
    let target = LmiPoint {
        q1: p_seed.clone(),
        q2: DVector::from_element(map.n_phi(), 1.0),
        theta: theta.clone(),
        lambda: DVector::from_element(map.m_basis.len(), 1.0),
    };
    let sol = solve_lmi(&inst, &target, None, opts)?;
    Ok((inst, sol))
}

/// Sequential re-solves with θ̃ frozen, starting from (P̄, Λ̄), until the
/// solution is feasible for the instance built at its own `(Q₁⁻¹, Q₂⁻¹)`.
/// Returns `(P, Λ, point, rounds)` where `point` is feasible at `(P, Λ)`.
fn sequential_rounds(
    map: &ThetaMap,
    theta: &DVector<f64>,
    rho: f64,
    mut p_bar: DMatrix<f64>,
    mut lambda_bar: DVector<f64>,
    mut lambda_m: DVector<f64>,
    max_rounds: usize,
    opts: &LmiSolveOptions,
) -> Result<(DMatrix<f64>, DVector<f64>, LmiPoint, LmiInstance, usize)> {
    let mut warm: Option<WarmStart> = None;
    let mut last_err = String::from("no rounds were run");
    for round in 1..=max_rounds {
        let q1_target = spd_inverse(&SymMatrix::new(p_bar.clone())?)?.into_inner();
        let eps = default_epsilon(&q1_target, &lambda_bar.map(|v| 1.0 / v));
        let inst = assemble_sequential(map, &p_bar, &lambda_bar, rho, ThetaMode::Fixed(theta.clone()), eps)?;
        let target = LmiPoint {
            q1: q1_target,
            q2: lambda_bar.map(|v| 1.0 / v),
            theta: theta.clone(),
            lambda: lambda_m.clone(),
        };
        match solve_lmi(&inst, &target, warm.as_ref(), opts) {
            Ok(sol) => {
                let p_new = spd_inverse(&SymMatrix::new(sol.point.q1.clone())?)?.into_inner();
                let l_new = sol.point.q2.map(|v| 1.0 / v);
                let eps_new = default_epsilon(&sol.point.q1, &sol.point.q2);
                let next = assemble_sequential(
                    map,
                    &p_new,
                    &l_new,
                    rho,
                    ThetaMode::Fixed(theta.clone()),
                    eps_new,
                )?;
                let resid = min_eig_residual(&next, &sol.point)?;
                if resid >= -1e-8 {
                    return Ok((p_new, l_new, sol.point, next, round));
                }
                last_err = format!("round {round}: residual {resid:.3e} at the updated instance");
                lambda_m = sol.point.lambda.clone();
                p_bar = p_new;
                lambda_bar = l_new;
                warm = Some(sol.warm);
            }
            Err(e) => {
                last_err = format!("round {round}: {e}");
                break;
            }
        }
    }
    Err(Error::Projection(last_err))
}

/// Initial certified controller, Lyapunov matrix and multiplier for
/// Algorithm 1.
pub fn initial_certificate(
    model: &LoopModel,
    dims: ControllerDims,
    activation: Activation,
    rho: f64,
    weights: &ObserverWeights,
    opts: &LmiSolveOptions,
) -> Result<(InitialCertificate, ThetaMap)> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(init_err("design", format!("rho must lie in (0, 1], got {rho}")));
    }
    let plant = model.plant_part();
    let theta0 = observer_controller(&plant, dims, activation, rho, weights)
        .map_err(|e| init_err("observer-design", e))?;
    let map = ThetaMap::new(model, &theta0).map_err(|e| init_err("affine-map", e))?;
    let theta_vec = theta0.blocks.flatten();
    let cl = model.closed_loop(&theta0)?;
    let p_seed = lyapunov_seed(&cl, rho).map_err(|e| init_err("lyapunov-seed", e))?;
    let n_phi = dims.n_phi;
    let (p_bar, lambda_bar, lambda_m) = if model.is_robust() {
        let (_, sol) = direct_certificate(&map, &theta_vec, rho, &p_seed, opts)
            .map_err(|e| init_err("robust-direct-lmi", e))?;
        (sol.point.q1.clone(), sol.point.q2.clone(), sol.point.lambda.clone())
    } else {
        (p_seed, DVector::from_element(n_phi, 1.0), DVector::zeros(0))
    };
    let (p0, lambda0, point, inst, rounds) =
        sequential_rounds(&map, &theta_vec, rho, p_bar, lambda_bar, lambda_m, 20, opts)
            .map_err(|e| init_err("bootstrap", e))?;
    let certificate = Certificate::from_point(&inst, &point, model, &theta0)?;
    // The returned point carries θ̃⁰ for the free-θ̃ layout.
    let point = LmiPoint {
        theta: theta_vec,
        ..point
    };
    Ok((
        InitialCertificate {
            p0,
            lambda0,
            theta0,
            point,
            certificate,
            bootstrap_rounds: rounds,
        },
        map,
    ))
}

/// Outcome of [`verify_controller`].
#[derive(Debug, Clone)]
pub enum Verification {
    Certified(Certificate),
    /// No certificate was found; this is not a proof of instability.
    NotCertified { reason: String },
}

/// Searches for a certificate of a fixed controller: a direct LMI solve
/// seeded by the Lyapunov matrix of the linear part, then at most 30 rounds
/// of the sequential update with θ̃ frozen.
pub fn verify_controller(
    model: &LoopModel,
    theta: &TransformedParams,
    rho: f64,
    opts: &LmiSolveOptions,
) -> Result<Verification> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(contract(format!("rho must lie in [0, 1], got {rho}")));
    }
    let map = ThetaMap::new(model, theta)?;
    let cl = model.closed_loop(theta)?;
    let p_seed = match lyapunov_seed(&cl, rho) {
        Ok(p) => p,
        Err(e @ (Error::Unstable(_) | Error::SolverFailure(_))) => {
            return Ok(Verification::NotCertified {
                reason: format!("no certificate found: {e}"),
            })
        }
        Err(e) => return Err(e),
    };
    let theta_vec = theta.blocks.flatten();
    let (_, sol) = match direct_certificate(&map, &theta_vec, rho, &p_seed, opts) {
        Ok(s) => s,
        Err(e @ (Error::Projection(_) | Error::SolverFailure(_))) => {
            return Ok(Verification::NotCertified {
                reason: format!("no certificate found: {e}"),
            })
        }
        Err(e) => return Err(e),
    };
    match sequential_rounds(
        &map,
        &theta_vec,
        rho,
        sol.point.q1.clone(),
        sol.point.q2.clone(),
        sol.point.lambda.clone(),
        30,
        opts,
    ) {
        Ok((_, _, point, inst, _)) => Ok(Verification::Certified(Certificate::from_point(
            &inst, &point, model, theta,
        )?)),
        Err(e) => Ok(Verification::NotCertified {
            reason: format!("no certificate found: {e}"),
        }),
    }
}

/// Whether the previous solution is feasible for the instance built at its
/// own inverse (the guarantee of the sequential update).
pub fn recursive_feasibility_check(prev: &LmiPoint, new_instance: &LmiInstance) -> Result<bool> {
    Ok(min_eig_residual(new_instance, prev)? >= -RECURSIVE_FEASIBILITY_TOL)
}

/// Convenience: static sector IQC for a scalar Δ plus extension.
pub fn robust_model(
    plant: &crate::plants::UncertainPlant,
    alpha: f64,
    beta: f64,
    rho: f64,
) -> Result<LoopModel> {
    LoopModel::robust(plant, sector_iqc(alpha, beta, rho)?)
}
