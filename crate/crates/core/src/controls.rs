//! Feedback laws and the `C1..C4` partition of the state space.
//!
//! All feedbacks act along `−v⊥ᵢ/‖v⊥ᵢ‖`; they differ in how the budget `M`
//! is spread over the agents.

use nalgebra::DMatrix;

use crate::cloud::{self, AgentCloud};
use crate::error::Result;
use crate::kernel::CommKernel;

/// Relative tolerance for equalities between per-agent norms and the threshold.
pub const TIE_TOL: f64 = 1e-10;
/// Slack allowed on the `ℓ₁ᴺ-ℓ₂ᵈ` budget.
pub const BUDGET_SLACK: f64 = 1e-12;

/// Per-agent control with its `ℓ₁ᴺ-ℓ₂ᵈ` budget.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVector {
    pub u: DMatrix<f64>,
    pub budget: f64,
}

impl ControlVector {
    pub fn zeros(agents: usize, dim: usize, budget: f64) -> Self {
        Self {
            u: DMatrix::zeros(agents, dim),
            budget,
        }
    }

    /// `Σᵢ ‖uᵢ‖`.
    pub fn l1l2_norm(&self) -> f64 {
        self.u.row_iter().map(|r| r.norm()).sum()
    }

    /// Indices of nonzero rows.
    pub fn support(&self) -> Vec<usize> {
        self.u
            .row_iter()
            .enumerate()
            .filter(|(_, r)| r.iter().any(|&c| c != 0.0))
            .map(|(i, _)| i)
            .collect()
    }

    /// Agent carrying the largest control (smallest index on ties), if any.
    pub fn active_agent(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in self.u.row_iter().enumerate() {
            let n = r.norm();
            if n > 0.0 && best.is_none_or(|(_, b)| n > b) {
                best = Some((i, n));
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn is_zero(&self) -> bool {
        self.u.iter().all(|&c| c == 0.0)
    }
}

/// `Σ‖uᵢ‖ ≤ M + 1e-12`.
pub fn admissibility_check(u: &ControlVector) -> bool {
    u.l1l2_norm() <= u.budget + BUDGET_SLACK
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// `max‖v⊥ᵢ‖ < γ(X)`
    C1,
    /// `max‖v⊥ᵢ‖ = γ(X)`
    C2,
    /// above threshold with a unique maximizer
    C3,
    /// above threshold with two or more tied maximizers
    C4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionLabel {
    pub region: Region,
    /// Agents attaining `max‖v⊥ᵢ‖` within the tie tolerance, ascending.
    pub maximizers: Vec<usize>,
}

/// Indices whose norm is within `TIE_TOL` (relative) of the maximum, and the maximum.
pub(crate) fn maximizers(norms: &[f64]) -> (Vec<usize>, f64) {
    let max = norms.iter().copied().fold(0.0, f64::max);
    let cut = max * (1.0 - TIE_TOL);
    let idx = norms
        .iter()
        .enumerate()
        .filter(|(_, &n)| n >= cut)
        .map(|(i, _)| i)
        .collect();
    (idx, max)
}

pub(crate) fn classify_norms(norms: &[f64], threshold: f64) -> RegionLabel {
    let (maximizers, max) = maximizers(norms);
    let scale = max.max(threshold);
    let region = if (max - threshold).abs() <= TIE_TOL * scale {
        Region::C2
    } else if max < threshold {
        Region::C1
    } else if maximizers.len() == 1 {
        Region::C3
    } else {
        Region::C4
    };
    RegionLabel { region, maximizers }
}

pub fn classify_region(cloud: &AgentCloud, kernel: &CommKernel) -> Result<RegionLabel> {
    let gamma = cloud::gamma_threshold(cloud::dispersion(cloud), kernel, cloud.agents())?;
    Ok(classify_norms(&cloud::row_norms(&cloud::perp_projection(cloud)), gamma))
}

/// Componentwise sparse feedback: the full budget on the smallest index with
/// maximal `‖v⊥ᵢ‖`, nothing when `max‖v⊥ᵢ‖ ≤ γ(B(x,x))`.
pub fn sparse_feedback(cloud: &AgentCloud, kernel: &CommKernel, budget: f64) -> Result<ControlVector> {
    let gamma = cloud::gamma_threshold(cloud::dispersion(cloud), kernel, cloud.agents())?;
    let vp = cloud::perp_projection(cloud);
    let norms = cloud::row_norms(&vp);
    let mut out = ControlVector::zeros(cloud.agents(), cloud.dim(), budget);
    let (idx, max) = maximizers(&norms);
    if max <= gamma || max == 0.0 {
        return Ok(out);
    }
    let j = idx[0];
    let row = vp.row(j) * (-budget / norms[j]);
    out.u.set_row(j, &row);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistributedMode {
    /// `u = −α v⊥` with a fixed gain.
    Projection { alpha: f64 },
    /// `uᵢ = −(M/N) v⊥ᵢ/‖v⊥ᵢ‖`.
    Uniform,
}

/// Largest admissible projection gain `M / (N √B(v₀,v₀))`; zero at consensus.
pub fn projection_gain(initial: &AgentCloud, budget: f64) -> f64 {
    let v0 = cloud::disagreement(initial);
    // B(v,v) carries cancellation error of order eps·max|v|²
    let scale = initial.velocities().amax();
    if v0 <= 1e-13 * scale * scale {
        0.0
    } else {
        budget / (initial.agents() as f64 * v0.sqrt())
    }
}

pub fn distributed_feedback(cloud: &AgentCloud, budget: f64, mode: DistributedMode) -> ControlVector {
    let vp = cloud::perp_projection(cloud);
    let n = cloud.agents();
    let mut out = ControlVector::zeros(n, cloud.dim(), budget);
    match mode {
        DistributedMode::Projection { alpha } => {
            out.u = vp * (-alpha);
        }
        DistributedMode::Uniform => {
            let share = budget / n as f64;
            // rounding residue of the mean subtraction counts as aligned
            let floor = 1e-13 * cloud.velocities().amax().max(f64::MIN_POSITIVE);
            for (i, norm) in cloud::row_norms(&vp).into_iter().enumerate() {
                if norm > floor {
                    out.u.set_row(i, &(vp.row(i) * (-share / norm)));
                }
            }
        }
    }
    out
}

/// `(Σⱼ αⱼ‖v⊥ⱼ‖, M·maxᵢ‖v⊥ᵢ‖)` for an allocation `α ≥ 0` of the budget.
///
/// The first entry is the decay rate of `V` produced by the allocation (up to
/// the factor `2/N`); the second is what the sparse feedback achieves.
pub fn decay_rate_bound_check(cloud: &AgentCloud, allocations: &[f64], budget: f64) -> (f64, f64) {
    let norms = cloud::row_norms(&cloud::perp_projection(cloud));
    let achieved = allocations.iter().zip(&norms).map(|(a, n)| a * n).sum();
    let max = norms.iter().copied().fold(0.0, f64::max);
    (achieved, budget * max)
}

/// A state feedback `u(x, v)`.
pub trait Feedback: Send + Sync {
    fn control(&self, cloud: &AgentCloud) -> Result<ControlVector>;
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroFeedback;

impl Feedback for ZeroFeedback {
    fn control(&self, cloud: &AgentCloud) -> Result<ControlVector> {
        Ok(ControlVector::zeros(cloud.agents(), cloud.dim(), 0.0))
    }
}

#[derive(Debug, Clone)]
pub struct SparseFeedback {
    pub kernel: CommKernel,
    pub budget: f64,
}

impl Feedback for SparseFeedback {
    fn control(&self, cloud: &AgentCloud) -> Result<ControlVector> {
        sparse_feedback(cloud, &self.kernel, self.budget)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DistributedFeedback {
    pub budget: f64,
    pub mode: DistributedMode,
}

impl DistributedFeedback {
    pub fn uniform(budget: f64) -> Self {
        Self {
            budget,
            mode: DistributedMode::Uniform,
        }
    }

    /// Projection mode with the gain frozen from the initial disagreement.
    pub fn projection(initial: &AgentCloud, budget: f64) -> Self {
        Self {
            budget,
            mode: DistributedMode::Projection {
                alpha: projection_gain(initial, budget),
            },
        }
    }
}

impl Feedback for DistributedFeedback {
    fn control(&self, cloud: &AgentCloud) -> Result<ControlVector> {
        Ok(distributed_feedback(cloud, self.budget, self.mode))
    }
}
