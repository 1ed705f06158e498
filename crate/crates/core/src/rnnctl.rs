//! RNN controller parameterization, loop transformation and closed-loop
//! assembly.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{contract, ensure_shape, Result};
use crate::iqc::ExtendedSystem;
use crate::plants::{PlantLti, Policy};
use crate::serde_mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
    LeakyRelu { slope: f64 },
}

impl Activation {
    pub fn eval(&self, v: f64) -> f64 {
        match *self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu { slope } => {
                if v >= 0.0 {
                    v
                } else {
                    slope * v
                }
            }
        }
    }

    /// Derivative (right derivative at the kink).
    pub fn derivative(&self, v: f64) -> f64 {
        match *self {
            Activation::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if v >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if v >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

/// Per-channel sector `[α, β]` of the activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorBounds {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl SectorBounds {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(contract("sector alpha and beta lengths differ"));
        }
        if alpha.iter().zip(&beta).any(|(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite()) {
            return Err(contract("sector bounds must satisfy alpha <= beta"));
        }
        Ok(Self { alpha, beta })
    }

    pub fn uniform(n: usize, alpha: f64, beta: f64) -> Result<Self> {
        Self::new(vec![alpha; n], vec![beta; n])
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// Diagonal of S_φ = (A_φ + B_φ)/2.
    pub fn center(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.alpha.iter().zip(&self.beta).map(|(a, b)| 0.5 * (a + b)),
        )
    }

    /// Diagonal of (B_φ − A_φ)/2.
    pub fn radius(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.alpha.iter().zip(&self.beta).map(|(a, b)| 0.5 * (b - a)),
        )
    }
}

/// Scalar sector of an activation, replicated over `n_phi` channels.
pub fn sector_of(activation: Activation, n_phi: usize) -> Result<SectorBounds> {
    match activation {
        Activation::Tanh | Activation::Relu => SectorBounds::uniform(n_phi, 0.0, 1.0),
        Activation::LeakyRelu { slope } => {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(contract(format!(
                    "leaky-relu slope must lie in (0, 1), got {slope}"
                )));
            }
            SectorBounds::uniform(n_phi, slope, 1.0)
        }
    }
}

/// Dimensions of a controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ControllerDims {
    pub n_xi: usize,
    pub n_phi: usize,
    pub n_y: usize,
    pub n_u: usize,
}

/// Block names in flattening order.
pub const BLOCK_NAMES: [&str; 8] = ["a_k", "b_k1", "b_k2", "c_k1", "d_k1", "d_k2", "c_k2", "d_k3"];

impl ControllerDims {
    pub fn block_shapes(&self) -> [(usize, usize); 8] {
        let ControllerDims { n_xi, n_phi, n_y, n_u } = *self;
        [
            (n_xi, n_xi),
            (n_xi, n_phi),
            (n_xi, n_y),
            (n_u, n_xi),
            (n_u, n_phi),
            (n_u, n_y),
            (n_phi, n_xi),
            (n_phi, n_y),
        ]
    }

    /// Number of free parameters; the structurally zero block is excluded.
    pub fn n_params(&self) -> usize {
        self.block_shapes().iter().map(|(r, c)| r * c).sum()
    }

    /// Index range of each block inside the flat parameter vector.
    pub fn block_ranges(&self) -> [Range<usize>; 8] {
        let shapes = self.block_shapes();
        let mut start = 0;
        std::array::from_fn(|i| {
            let len = shapes[i].0 * shapes[i].1;
            let r = start..start + len;
            start += len;
            r
        })
    }
}

/// The eight blocks of the stacked matrix
/// `[[A_K, B_K1, B_K2], [C_K1, D_K1, D_K2], [C_K2, 0, D_K3]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerBlocks {
    #[serde(with = "serde_mat::matrix")]
    pub a_k: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub b_k1: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub b_k2: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub c_k1: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub d_k1: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub d_k2: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub c_k2: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub d_k3: DMatrix<f64>,
}

impl ControllerBlocks {
    pub fn zeros(dims: ControllerDims) -> Self {
        let s = dims.block_shapes();
        let z = |i: usize| DMatrix::zeros(s[i].0, s[i].1);
        Self {
            a_k: z(0),
            b_k1: z(1),
            b_k2: z(2),
            c_k1: z(3),
            d_k1: z(4),
            d_k2: z(5),
            c_k2: z(6),
            d_k3: z(7),
        }
    }

    pub fn blocks(&self) -> [&DMatrix<f64>; 8] {
        [
            &self.a_k, &self.b_k1, &self.b_k2, &self.c_k1, &self.d_k1, &self.d_k2, &self.c_k2,
            &self.d_k3,
        ]
    }

    fn blocks_mut(&mut self) -> [&mut DMatrix<f64>; 8] {
        [
            &mut self.a_k,
            &mut self.b_k1,
            &mut self.b_k2,
            &mut self.c_k1,
            &mut self.d_k1,
            &mut self.d_k2,
            &mut self.c_k2,
            &mut self.d_k3,
        ]
    }

    /// Dimensions inferred from the blocks, checked for consistency.
    pub fn dims(&self) -> Result<ControllerDims> {
        let dims = ControllerDims {
            n_xi: self.a_k.nrows(),
            n_phi: self.c_k2.nrows(),
            n_y: self.b_k2.ncols(),
            n_u: self.c_k1.nrows(),
        };
        for (i, (m, want)) in self.blocks().iter().zip(dims.block_shapes()).enumerate() {
            ensure_shape(BLOCK_NAMES[i], m.shape(), want)?;
        }
        Ok(dims)
    }

    /// Row-major concatenation of the blocks in [`BLOCK_NAMES`] order.
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::new();
        for m in self.blocks() {
            for r in m.row_iter() {
                out.extend(r.iter());
            }
        }
        DVector::from_vec(out)
    }

    pub fn unflatten(dims: ControllerDims, flat: &[f64]) -> Result<Self> {
        if flat.len() != dims.n_params() {
            return Err(contract(format!(
                "expected {} controller parameters, got {}",
                dims.n_params(),
                flat.len()
            )));
        }
        let mut out = Self::zeros(dims);
        let ranges = dims.block_ranges();
        for (m, r) in out.blocks_mut().into_iter().zip(ranges) {
            let nc = m.ncols();
            for (k, &v) in flat[r].iter().enumerate() {
                m[(k / nc, k % nc)] = v;
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

fn check_sectors(blocks: &ControllerBlocks, sectors: &SectorBounds) -> Result<ControllerDims> {
    let dims = blocks.dims()?;
    if sectors.len() != dims.n_phi {
        return Err(contract("sector length must equal n_phi"));
    }
    Ok(dims)
}

/// Controller parameters θ in the original form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnParams {
    #[serde(flatten)]
    pub blocks: ControllerBlocks,
    pub activation: Activation,
    pub sectors: SectorBounds,
}

/// Controller parameters θ̃ after the loop transformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformedParams {
    #[serde(flatten)]
    pub blocks: ControllerBlocks,
    pub activation: Activation,
    pub sectors: SectorBounds,
}

impl TransformedParams {
    pub fn zeros(dims: ControllerDims, activation: Activation) -> Result<Self> {
        Ok(Self {
            blocks: ControllerBlocks::zeros(dims),
            activation,
            sectors: sector_of(activation, dims.n_phi)?,
        })
    }

    pub fn dims(&self) -> Result<ControllerDims> {
        check_sectors(&self.blocks, &self.sectors)
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        Ok(Self {
            blocks: ControllerBlocks::unflatten(self.dims()?, flat)?,
            activation: self.activation,
            sectors: self.sectors.clone(),
        })
    }
}

fn scale_cols(m: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut c) in out.column_iter_mut().enumerate() {
        c *= d[j];
    }
    out
}

/// θ → θ̃: `Ã = A + B_K1 S C_K2`, `B̃_K2 = B_K2 + B_K1 S D_K3`,
/// `C̃_K1 = C_K1 + D_K1 S C_K2`, `D̃_K2 = D_K2 + D_K1 S D_K3`.
pub fn loop_transform(theta: &RnnParams) -> Result<TransformedParams> {
    check_sectors(&theta.blocks, &theta.sectors)?;
    let s = theta.sectors.center();
    let b = &theta.blocks;
    let b1s = scale_cols(&b.b_k1, &s);
    let d1s = scale_cols(&b.d_k1, &s);
    let mut out = b.clone();
    out.a_k += &b1s * &b.c_k2;
    out.b_k2 += &b1s * &b.d_k3;
    out.c_k1 += &d1s * &b.c_k2;
    out.d_k2 += &d1s * &b.d_k3;
    Ok(TransformedParams {
        blocks: out,
        activation: theta.activation,
        sectors: theta.sectors.clone(),
    })
}

/// θ̃ → θ by back-substitution.
pub fn inverse_transform(theta_t: &TransformedParams) -> Result<RnnParams> {
    check_sectors(&theta_t.blocks, &theta_t.sectors)?;
    let s = theta_t.sectors.center();
    let b = &theta_t.blocks;
    let b1s = scale_cols(&b.b_k1, &s);
    let d1s = scale_cols(&b.d_k1, &s);
    let mut out = b.clone();
    out.a_k -= &b1s * &b.c_k2;
    out.b_k2 -= &b1s * &b.d_k3;
    out.c_k1 -= &d1s * &b.c_k2;
    out.d_k2 -= &d1s * &b.d_k3;
    Ok(RnnParams {
        blocks: out,
        activation: theta_t.activation,
        sectors: theta_t.sectors.clone(),
    })
}

/// Shifted nonlinearity `φ̃(v) = (φ(v) − S v) / ((β − α)/2)`, which lies in
/// sector [−1, 1]. Channels with a degenerate sector return 0.
pub fn phi_tilde(activation: Activation, sectors: &SectorBounds, v: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        v.len(),
        v.iter().enumerate().map(|(i, &vi)| {
            let (a, b) = (sectors.alpha[i], sectors.beta[i]);
            let rad = 0.5 * (b - a);
            if rad == 0.0 {
                0.0
            } else {
                (activation.eval(vi) - 0.5 * (a + b) * vi) / rad
            }
        }),
    )
}

/// Elementwise derivative of [`phi_tilde`].
pub fn phi_tilde_derivative(
    activation: Activation,
    sectors: &SectorBounds,
    v: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_iterator(
        v.len(),
        v.iter().enumerate().map(|(i, &vi)| {
            let (a, b) = (sectors.alpha[i], sectors.beta[i]);
            let rad = 0.5 * (b - a);
            if rad == 0.0 {
                0.0
            } else {
                (activation.derivative(vi) - 0.5 * (a + b)) / rad
            }
        }),
    )
}

/// One controller step: `(ξ_next, u, v, w)` in the original form and
/// `(ξ_next, u, v, z)` in the transformed form.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerStep {
    pub xi_next: DVector<f64>,
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    /// `w = φ(v)` or `z = φ̃(v)` depending on the form.
    pub nl_out: DVector<f64>,
    pub diverged: bool,
}

fn finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn controller_step(theta: &RnnParams, xi: &DVector<f64>, y: &DVector<f64>) -> ControllerStep {
    let b = &theta.blocks;
    let v = &b.c_k2 * xi + &b.d_k3 * y;
    let diverged = !finite(&v);
    let w = v.map(|x| theta.activation.eval(x));
    let xi_next = &b.a_k * xi + &b.b_k1 * &w + &b.b_k2 * y;
    let u = &b.c_k1 * xi + &b.d_k1 * &w + &b.d_k2 * y;
    ControllerStep {
        xi_next,
        u,
        v,
        nl_out: w,
        diverged,
    }
}

pub fn controller_step_transformed(
    theta_t: &TransformedParams,
    xi: &DVector<f64>,
    y: &DVector<f64>,
) -> ControllerStep {
    let b = &theta_t.blocks;
    let v = &b.c_k2 * xi + &b.d_k3 * y;
    let diverged = !finite(&v);
    let z = phi_tilde(theta_t.activation, &theta_t.sectors, &v);
    let sz = z.component_mul(&theta_t.sectors.radius());
    let xi_next = &b.a_k * xi + &b.b_k1 * &sz + &b.b_k2 * y;
    let u = &b.c_k1 * xi + &b.d_k1 * &sz + &b.d_k2 * y;
    ControllerStep {
        xi_next,
        u,
        v,
        nl_out: z,
        diverged,
    }
}

/// Deterministic RNN policy in transformed form.
#[derive(Debug, Clone)]
pub struct RnnPolicy {
    pub params: TransformedParams,
}

impl Policy for RnnPolicy {
    type State = DVector<f64>;

    fn reset(&self) -> DVector<f64> {
        DVector::zeros(self.params.blocks.a_k.nrows())
    }

    fn act(
        &self,
        xi: &mut DVector<f64>,
        observation: &DVector<f64>,
        _rng: &mut dyn rand::RngCore,
    ) -> Result<DVector<f64>> {
        let s = controller_step_transformed(&self.params, xi, observation);
        *xi = s.xi_next;
        Ok(s.u)
    }
}

/// Closed-loop matrices
/// `ζ⁺ = 𝒜ζ + ℬ₁q + ℬ₂z`, `v = 𝒞₁ζ + 𝒟₁q + 𝒟₂z`, `r = 𝒞₂ζ + 𝒟₃q + 𝒟₄z`.
/// The nominal loop has no q or r channels (`n_q = n_r = 0`), so that
/// `ℬ = ℬ₂`, `𝒞 = 𝒞₁`, `𝒟 = 𝒟₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub c1: DMatrix<f64>,
    pub d1: DMatrix<f64>,
    pub d2: DMatrix<f64>,
    pub c2: DMatrix<f64>,
    pub d3: DMatrix<f64>,
    pub d4: DMatrix<f64>,
}

impl ClosedLoop {
    pub fn n_zeta(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_q(&self) -> usize {
        self.b1.ncols()
    }
    pub fn n_phi(&self) -> usize {
        self.b2.ncols()
    }
    pub fn n_r(&self) -> usize {
        self.c2.nrows()
    }

    pub fn blocks(&self) -> [&DMatrix<f64>; 9] {
        [
            &self.a, &self.b1, &self.b2, &self.c1, &self.d1, &self.d2, &self.c2, &self.d3,
            &self.d4,
        ]
    }

    /// One step of the loop for given q and z; returns `(ζ⁺, v, r)`.
    pub fn step(
        &self,
        zeta: &DVector<f64>,
        q: &DVector<f64>,
        z: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        (
            &self.a * zeta + &self.b1 * q + &self.b2 * z,
            &self.c1 * zeta + &self.d1 * q + &self.d2 * z,
            &self.c2 * zeta + &self.d3 * q + &self.d4 * z,
        )
    }
}

fn stack2x2(
    a11: &DMatrix<f64>,
    a12: &DMatrix<f64>,
    a21: &DMatrix<f64>,
    a22: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (r1, c1) = a11.shape();
    let (r2, c2) = a22.shape();
    let mut m = DMatrix::zeros(r1 + r2, c1 + c2);
    m.view_mut((0, 0), (r1, c1)).copy_from(a11);
    m.view_mut((0, c1), (r1, c2)).copy_from(a12);
    m.view_mut((r1, 0), (r2, c1)).copy_from(a21);
    m.view_mut((r1, c1), (r2, c2)).copy_from(a22);
    m
}

fn vstack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    m.rows_mut(0, top.nrows()).copy_from(top);
    m.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    m
}

fn hstack(left: &DMatrix<f64>, right: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(left.nrows(), left.ncols() + right.ncols());
    m.columns_mut(0, left.ncols()).copy_from(left);
    m.columns_mut(left.ncols(), right.ncols()).copy_from(right);
    m
}

/// Shared assembly over a plant `(A, B_q, B_u, C_r, D_rq, C_y)`.
fn assemble(
    theta_t: &TransformedParams,
    a_p: &DMatrix<f64>,
    b_q: &DMatrix<f64>,
    b_u: &DMatrix<f64>,
    c_r: &DMatrix<f64>,
    d_rq: &DMatrix<f64>,
    c_y: &DMatrix<f64>,
) -> Result<ClosedLoop> {
    let dims = theta_t.dims()?;
    if b_u.ncols() != dims.n_u {
        return Err(contract(format!(
            "plant has {} inputs, controller produces {}",
            b_u.ncols(),
            dims.n_u
        )));
    }
    if c_y.nrows() != dims.n_y {
        return Err(contract(format!(
            "plant has {} outputs, controller expects {}",
            c_y.nrows(),
            dims.n_y
        )));
    }
    let k = &theta_t.blocks;
    let rad = theta_t.sectors.radius();
    let n_xi = dims.n_xi;
    let n_phi = dims.n_phi;
    let n_q = b_q.ncols();
    let n_r = c_r.nrows();

    let a = stack2x2(
        &(a_p + b_u * &k.d_k2 * c_y),
        &(b_u * &k.c_k1),
        &(&k.b_k2 * c_y),
        &k.a_k,
    );
    let b1 = vstack(b_q, &DMatrix::zeros(n_xi, n_q));
    let b2 = vstack(&(b_u * scale_cols(&k.d_k1, &rad)), &scale_cols(&k.b_k1, &rad));
    let c1 = hstack(&(&k.d_k3 * c_y), &k.c_k2);
    let c2 = hstack(c_r, &DMatrix::zeros(n_r, n_xi));
    Ok(ClosedLoop {
        a,
        b1,
        b2,
        c1,
        d1: DMatrix::zeros(n_phi, n_q),
        d2: DMatrix::zeros(n_phi, n_phi),
        c2,
        d3: d_rq.clone(),
        d4: DMatrix::zeros(n_r, n_phi),
    })
}

/// Nominal closed loop of plant and θ̃.
pub fn assemble_closed_loop(theta_t: &TransformedParams, plant: &PlantLti) -> Result<ClosedLoop> {
    let n = plant.n_state();
    assemble(
        theta_t,
        &plant.a_g,
        &DMatrix::zeros(n, 0),
        &plant.b_g,
        &DMatrix::zeros(0, n),
        &DMatrix::zeros(0, 0),
        &plant.c_g,
    )
}

/// Closed loop of the extended system (plant plus IQC filter) and θ̃.
pub fn assemble_closed_loop_robust(
    theta_t: &TransformedParams,
    ext: &ExtendedSystem,
) -> Result<ClosedLoop> {
    assemble(
        theta_t, &ext.a_e, &ext.b_e1, &ext.b_e2, &ext.c_e1, &ext.d_e1, &ext.c_e2,
    )
}
