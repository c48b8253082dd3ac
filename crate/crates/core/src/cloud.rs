//! Agent state, the bilinear form `B`, the communication Laplacian and the
//! consensus threshold `γ(X)`.
//!
//! Every `N × d` array stores one agent per row.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, RowDVector};

use crate::error::{Error, Result};
use crate::kernel::CommKernel;
use crate::quadrature;

/// Absolute tolerance for the quadrature route of [`gamma_threshold`].
pub const GAMMA_QUAD_TOL: f64 = 1e-10;
const GAMMA_QUAD_MAX_INTERVALS: usize = 4000;

/// Positions `x` and consensus parameters `v` of `N` agents in `ℝ^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentCloud {
    x: DMatrix<f64>,
    v: DMatrix<f64>,
}

impl AgentCloud {
    pub fn new(x: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        if x.shape() != v.shape() {
            return Err(Error::DimensionMismatch(format!(
                "positions are {:?} but consensus parameters are {:?}",
                x.shape(),
                v.shape()
            )));
        }
        if x.nrows() < 2 || x.ncols() < 1 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 agents in at least 1 dimension, got {:?}",
                x.shape()
            )));
        }
        if x.iter().chain(v.iter()).any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("state contains non-finite entries".into()));
        }
        Ok(Self { x, v })
    }

    /// Build from row-major slices (agent after agent).
    pub fn from_rows(n: usize, d: usize, x: &[f64], v: &[f64]) -> Result<Self> {
        if x.len() != n * d || v.len() != n * d {
            return Err(Error::DimensionMismatch(format!(
                "expected {} = {n}x{d} entries, got {} positions and {} parameters",
                n * d,
                x.len(),
                v.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, d, x), DMatrix::from_row_slice(n, d, v))
    }

    /// Unchecked constructor for integrator internals.
    pub(crate) fn from_parts(x: DMatrix<f64>, v: DMatrix<f64>) -> Self {
        Self { x, v }
    }

    pub fn agents(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn positions(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn velocities(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.x, self.v)
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.v.iter()).all(|c| c.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.x.iter().chain(self.v.iter()).fold(0.0, |m, c| m.max(c.abs()))
    }
}

/// `X`, `V`, `γ(X)` and `max_i ‖v⊥ᵢ‖` at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    pub dispersion: f64,
    pub disagreement: f64,
    pub gamma: f64,
    pub max_perp_norm: f64,
}

impl Diagnostics {
    pub fn sqrt_v(&self) -> f64 {
        self.disagreement.max(0.0).sqrt()
    }

    /// `γ(X) ≥ √V`.
    pub fn in_consensus_region(&self) -> bool {
        self.gamma >= self.sqrt_v()
    }
}

/// Row average of an `N × d` array.
pub fn mean_row(u: &DMatrix<f64>) -> RowDVector<f64> {
    u.row_mean()
}

/// `v̄ = (1/N) Σ vᵢ`.
pub fn mean_consensus(cloud: &AgentCloud) -> RowDVector<f64> {
    mean_row(&cloud.v)
}

/// `u⊥ᵢ = uᵢ − ū`.
pub fn perp(u: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = u.row_mean();
    let mut out = u.clone();
    for mut row in out.row_iter_mut() {
        row -= &mean;
    }
    out
}

/// `v⊥` of the cloud.
pub fn perp_projection(cloud: &AgentCloud) -> DMatrix<f64> {
    perp(&cloud.v)
}

/// Per-agent Euclidean norms of the rows of `u`.
pub fn row_norms(u: &DMatrix<f64>) -> Vec<f64> {
    u.row_iter().map(|r| r.norm()).collect()
}

fn check_same_shape(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<()> {
    if u.shape() != v.shape() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", u.shape(), v.shape())));
    }
    Ok(())
}

/// `B(u,v) = (1/N) Σ ⟨uᵢ,vᵢ⟩ − ⟨ū,v̄⟩`.
pub fn bilinear_b(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(u, v)?;
    Ok(bilinear_b_unchecked(u, v))
}

pub(crate) fn bilinear_b_unchecked(u: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    let n = u.nrows() as f64;
    u.dot(v) / n - u.row_mean().dot(&v.row_mean())
}

/// `B(u,v) = (1/2N²) Σᵢⱼ ⟨uᵢ−uⱼ, vᵢ−vⱼ⟩`, the pairwise form.
pub fn bilinear_b_pairwise(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(u, v)?;
    let n = u.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            let du = u.row(i) - u.row(j);
            let dv = v.row(i) - v.row(j);
            sum += du.dot(&dv);
        }
    }
    Ok(sum / (2.0 * (n * n) as f64))
}

/// `X = B(x,x)`.
pub fn dispersion(cloud: &AgentCloud) -> f64 {
    bilinear_b_unchecked(&cloud.x, &cloud.x).max(0.0)
}

/// `V = B(v,v)`.
pub fn disagreement(cloud: &AgentCloud) -> f64 {
    bilinear_b_unchecked(&cloud.v, &cloud.v).max(0.0)
}

/// `L = D − A` with `Aᵢⱼ = a(‖xⱼ − xᵢ‖)/N`.
pub fn laplacian(cloud: &AgentCloud, kernel: &CommKernel) -> DMatrix<f64> {
    laplacian_of_positions(&cloud.x, kernel)
}

pub fn laplacian_of_positions(x: &DMatrix<f64>, kernel: &CommKernel) -> DMatrix<f64> {
    let n = x.nrows();
    let inv_n = 1.0 / n as f64;
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let r = (x.row(j) - x.row(i)).norm();
            let w = kernel.rate(r) * inv_n;
            l[(i, j)] = -w;
            l[(j, i)] = -w;
            l[(i, i)] += w;
            l[(j, j)] += w;
        }
    }
    l
}

/// `γ(X) = ∫_{√X}^∞ a(√(2N) r) dr`.
///
/// Closed form for Cucker–Smale with `β = 1`, adaptive quadrature otherwise.
pub fn gamma_threshold(dispersion: f64, kernel: &CommKernel, agents: usize) -> Result<f64> {
    kernel.require_integrable()?;
    if let CommKernel::CuckerSmale { k, sigma, beta } = kernel {
        if *beta == 1.0 {
            return Ok(gamma_cs_closed_form(dispersion, *k, *sigma, agents));
        }
    }
    gamma_by_quadrature(dispersion, kernel, agents)
}

/// `(K/(σ√(2N)))·(π/2 − arctan(√(2NX)/σ))`, valid for `β = 1`.
pub fn gamma_cs_closed_form(dispersion: f64, k: f64, sigma: f64, agents: usize) -> f64 {
    let c = (2.0 * agents as f64).sqrt();
    let t0 = c * dispersion.max(0.0).sqrt() / sigma;
    // π/2 − arctan(t) = arctan(1/t) avoids cancellation for large t
    let tail = if t0 > 1.0 {
        (1.0 / t0).atan()
    } else {
        FRAC_PI_2 - t0.atan()
    };
    k / (sigma * c) * tail
}

/// Quadrature route for `γ`, independent of the closed form.
pub fn gamma_by_quadrature(dispersion: f64, kernel: &CommKernel, agents: usize) -> Result<f64> {
    kernel.require_integrable()?;
    let c = (2.0 * agents as f64).sqrt();
    let lower = dispersion.max(0.0).sqrt();
    match kernel {
        CommKernel::CuckerSmale { k, sigma, beta } => {
            // γ = (K σ^{1−2β}/c) ∫_{t0}^∞ (1+t²)^{−β} dt with t = c r / σ
            let t0 = c * lower / sigma;
            let scale = k * sigma.powf(1.0 - 2.0 * beta) / c;
            Ok(scale * cs_normalized_tail(t0, *beta))
        }
        CommKernel::General(_) => {
            // r = √X + tan θ maps [√X, ∞) onto [0, π/2)
            let f = |theta: f64| {
                let (s, co) = theta.sin_cos();
                let value = kernel.rate(c * (lower + s / co)) / (co * co);
                if value.is_finite() {
                    value
                } else {
                    0.0
                }
            };
            Ok(quadrature::integrate(f, 0.0, FRAC_PI_2, GAMMA_QUAD_TOL, GAMMA_QUAD_MAX_INTERVALS).value)
        }
    }
}

/// `∫_{t0}^∞ (1+t²)^{−β} dt` for `β > 1/2`.
fn cs_normalized_tail(t0: f64, beta: f64) -> f64 {
    let g = |t: f64| (1.0 + t * t).powf(-beta);
    let t1 = t0.max(1.0);
    let head = if t0 < t1 {
        quadrature::integrate(g, t0, t1, 0.5 * GAMMA_QUAD_TOL, GAMMA_QUAD_MAX_INTERVALS).value
    } else {
        0.0
    };
    // t = t1 u^{−k} with k(2β − 1) = 1 turns the algebraic tail into a bounded
    // integrand k t1 (u^{2k} + t1²)^{−β} on (0, 1]
    let k = 1.0 / (2.0 * beta - 1.0);
    let tail_fn = |u: f64| k * t1 * (u.powf(2.0 * k) + t1 * t1).powf(-beta);
    let tail = quadrature::integrate(tail_fn, 0.0, 1.0, 0.5 * GAMMA_QUAD_TOL, GAMMA_QUAD_MAX_INTERVALS).value;
    head + tail
}

/// All diagnostics of a cloud.
pub fn diagnostics(cloud: &AgentCloud, kernel: &CommKernel) -> Result<Diagnostics> {
    let dispersion = dispersion(cloud);
    let disagreement = disagreement(cloud);
    // a non-integrable kernel has an unbounded threshold: every state is in the region
    let gamma = if kernel.is_integrable() {
        gamma_threshold(dispersion, kernel, cloud.agents())?
    } else {
        f64::INFINITY
    };
    let max_perp_norm = row_norms(&perp_projection(cloud)).into_iter().fold(0.0, f64::max);
    Ok(Diagnostics {
        dispersion,
        disagreement,
        gamma,
        max_perp_norm,
    })
}
