//! Consensus-region test, steering-time and sampling-time bounds, the
//! consensus-number estimate, and residual checks of the inequalities behind
//! the consensus condition.

use std::fmt;

use nalgebra::DMatrix;

use crate::cloud::{self, AgentCloud};
use crate::controls::maximizers;
use crate::dynamics::{controlled_rhs, Trajectory};
use crate::error::{Error, Result};
use crate::kernel::CommKernel;
use crate::quadrature;

/// `γ(X₀) ≥ √V₀`.
pub fn consensus_region_check(cloud: &AgentCloud, kernel: &CommKernel) -> Result<bool> {
    kernel.require_integrable()?;
    let gamma = cloud::gamma_threshold(cloud::dispersion(cloud), kernel, cloud.agents())?;
    Ok(gamma >= cloud::disagreement(cloud).max(0.0).sqrt())
}

/// Upper bound on the number of control activations needed to reach the
/// consensus region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ConsensusNumber {
    Finite(u64),
    Infinite,
}

impl fmt::Display for ConsensusNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConsensusNumber::Finite(n) => write!(f, "{n}"),
            ConsensusNumber::Infinite => write!(f, "inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilizationBounds {
    pub x_bar: f64,
    pub t0: f64,
    pub tau0: f64,
    pub n_bound: ConsensusNumber,
}

fn sqrt_v0(cloud: &AgentCloud) -> f64 {
    cloud::disagreement(cloud).max(0.0).sqrt()
}

/// `(X̄, T0)`: dispersion bound and time bound for reaching the region.
///
/// Continuous feedback: `X̄ = 2X₀ + N⁴V₀²/(2M²)`, `T0 = (N/M)(√V₀ − γ(X̄))`.
/// Sampled feedback: `X̄ = 2X₀ + 2N⁴V₀²/M²`, `T0 = (2N/M)(√V₀ − γ(X̄))`.
pub fn steering_time_bound(cloud: &AgentCloud, kernel: &CommKernel, budget: f64, sampled: bool) -> Result<(f64, f64)> {
    if !(budget > 0.0) {
        return Err(Error::InvalidArgument(format!("budget must be positive, got {budget}")));
    }
    let n = cloud.agents() as f64;
    let x0 = cloud::dispersion(cloud);
    let v0 = cloud::disagreement(cloud).max(0.0);
    let n4v2 = n.powi(4) * v0 * v0;
    let (x_bar, factor) = if sampled {
        (2.0 * x0 + 2.0 * n4v2 / (budget * budget), 2.0 * n / budget)
    } else {
        (2.0 * x0 + n4v2 / (2.0 * budget * budget), n / budget)
    };
    if v0 == 0.0 {
        return Ok((x_bar, 0.0));
    }
    let gamma = if kernel.is_integrable() {
        cloud::gamma_threshold(x_bar, kernel, cloud.agents())?
    } else {
        f64::INFINITY
    };
    let t0 = (factor * (v0.sqrt() - gamma)).max(0.0);
    Ok((x_bar, t0))
}

/// Positive root of `2a(0)M τ² + (a(0)(1+√N)√V₀ + M) τ − γ(X̄)/2 = 0`,
/// with `X̄` from the sampled steering bound. Infinite at consensus.
pub fn max_sampling_time(cloud: &AgentCloud, kernel: &CommKernel, budget: f64) -> Result<f64> {
    let (x_bar, _) = steering_time_bound(cloud, kernel, budget, true)?;
    let root_v0 = sqrt_v0(cloud);
    if root_v0 == 0.0 {
        return Ok(f64::INFINITY);
    }
    kernel.require_integrable()?;
    let gamma = cloud::gamma_threshold(x_bar, kernel, cloud.agents())?;
    let a0 = kernel.rate(0.0);
    let n = cloud.agents() as f64;
    let qa = 2.0 * a0 * budget;
    let qb = a0 * (1.0 + n.sqrt()) * root_v0 + budget;
    let qc = -0.5 * gamma;
    // qc < 0 < qa, so the roots have opposite signs; this form avoids cancellation
    let disc = (qb * qb - 4.0 * qa * qc).sqrt();
    Ok(-2.0 * qc / (qb + disc))
}

/// Left side of the sampling-time condition at `tau`.
pub fn sampling_condition_lhs(cloud: &AgentCloud, kernel: &CommKernel, budget: f64, tau: f64) -> f64 {
    let a0 = kernel.rate(0.0);
    let n = cloud.agents() as f64;
    2.0 * a0 * budget * tau * tau + (a0 * (1.0 + n.sqrt()) * sqrt_v0(cloud) + budget) * tau
}

fn number_from(t0: f64, tau0: f64, horizon: f64) -> ConsensusNumber {
    if horizon < t0 {
        ConsensusNumber::Infinite
    } else if t0 == 0.0 {
        ConsensusNumber::Finite(0)
    } else {
        ConsensusNumber::Finite((t0 / tau0).ceil() as u64)
    }
}

/// `∞` when `horizon < T0`, otherwise `⌈T0/τ0⌉` (sampled bounds).
pub fn consensus_number_bound(
    cloud: &AgentCloud,
    kernel: &CommKernel,
    budget: f64,
    horizon: f64,
) -> Result<ConsensusNumber> {
    Ok(stabilization_bounds(cloud, kernel, budget, horizon)?.n_bound)
}

/// Sampled `X̄`, `T0`, `τ0` and the consensus number for one initial state.
pub fn stabilization_bounds(
    cloud: &AgentCloud,
    kernel: &CommKernel,
    budget: f64,
    horizon: f64,
) -> Result<StabilizationBounds> {
    let (x_bar, t0) = steering_time_bound(cloud, kernel, budget, true)?;
    let tau0 = max_sampling_time(cloud, kernel, budget)?;
    Ok(StabilizationBounds {
        x_bar,
        t0,
        tau0,
        n_bound: number_from(t0, tau0, horizon),
    })
}

/// Estimate over a finite sample of initial states: largest `T0` and
/// smallest `τ0` across the sample.
pub fn consensus_number_bound_batch(
    samples: &[AgentCloud],
    kernel: &CommKernel,
    budget: f64,
    horizon: f64,
) -> Result<StabilizationBounds> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty sample of initial states".into()));
    }
    let mut x_bar = 0.0f64;
    let mut t0 = 0.0f64;
    let mut tau0 = f64::INFINITY;
    for s in samples {
        let b = stabilization_bounds(s, kernel, budget, horizon)?;
        x_bar = x_bar.max(b.x_bar);
        t0 = t0.max(b.t0);
        tau0 = tau0.min(b.tau0);
    }
    Ok(StabilizationBounds {
        x_bar,
        t0,
        tau0,
        n_bound: number_from(t0, tau0, horizon),
    })
}

/// Largest positive violation of each inequality over a trajectory.
///
/// A value of `0` means the inequality held everywhere it applies.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LemmaReport {
    /// `dV/dt + 2a(√(2NX))V`.
    pub lyapunov_decay: f64,
    /// `d√V/dt + a(√(2NX))√V`.
    pub sqrt_decay: f64,
    /// `d√X/dt − √V`.
    pub dispersion_growth: f64,
    /// `√V(t) + ∫_{√X₀}^{√X(t)} a(√(2N)r)dr − √V₀`.
    pub integrated: f64,
    /// `d/dt(max‖v⊥ᵢ‖ − γ(X))`; only evaluated on uncontrolled runs.
    pub invariance: Option<f64>,
    /// Linear-decay consequents, when a rate was supplied.
    pub linear_decay: Option<LinearDecayReport>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearDecayReport {
    pub rate: f64,
    /// `dV/dt + α√V` on the checked window; the hypothesis.
    pub hypothesis: f64,
    /// `V(t) − (√V₀ − αt/2)²`.
    pub disagreement_bound: f64,
    /// `X(t) − 2X₀ − 2N²V₀²/α²`.
    pub dispersion_bound: f64,
    /// End of the window the consequents were checked on.
    pub window_end: f64,
}

impl LemmaReport {
    /// Largest of all residuals.
    pub fn worst(&self) -> f64 {
        let mut w = self
            .lyapunov_decay
            .max(self.sqrt_decay)
            .max(self.dispersion_growth)
            .max(self.integrated)
            .max(self.invariance.unwrap_or(0.0));
        if let Some(l) = &self.linear_decay {
            w = w.max(l.hypothesis).max(l.disagreement_bound).max(l.dispersion_bound);
        }
        w
    }
}

struct Rates {
    v: f64,
    x: f64,
    sqrt_v: f64,
    sqrt_x: f64,
    dv: f64,
    dx: f64,
    d_max_perp: f64,
}

// Exact time derivatives of X, V and max‖v⊥ᵢ‖ from the vector field at a state.
fn rates(state: &AgentCloud, kernel: &CommKernel, control: &crate::controls::ControlVector) -> Rates {
    let rhs = controlled_rhs(state, kernel, control);
    let xp = cloud::perp(state.positions());
    let vp = cloud::perp(state.velocities());
    let ap = cloud::perp(&rhs.dv);
    let n = state.agents() as f64;
    let inner = |a: &DMatrix<f64>, b: &DMatrix<f64>| a.dot(b) / n;
    let x = inner(&xp, &xp).max(0.0);
    let v = inner(&vp, &vp).max(0.0);
    let dx = 2.0 * inner(&xp, &vp);
    let dv = 2.0 * inner(&vp, &ap);
    let sqrt_v = v.sqrt();
    let sqrt_x = x.sqrt();

    let norms = cloud::row_norms(&vp);
    let (tied, max) = maximizers(&norms);
    let d_max_perp = if max > 0.0 {
        tied.iter()
            .map(|&i| vp.row(i).dot(&ap.row(i)) / norms[i])
            .fold(f64::NEG_INFINITY, f64::max)
    } else {
        // all perpendicular velocities vanish: right derivative is max‖v̇⊥ᵢ‖
        cloud::row_norms(&ap).into_iter().fold(0.0, f64::max)
    };
    Rates {
        v,
        x,
        sqrt_v,
        sqrt_x,
        dv,
        dx,
        d_max_perp,
    }
}

/// Evaluate the decay and growth inequalities on every stored state.
///
/// Derivatives are taken from the vector field at the stored states (with
/// the control held on the following step), not from finite differences of
/// the grid. When `decay_rate` is `Some(α)` the consequents of
/// `dV/dt ≤ −α√V` are checked up to the entry time (or the end of the run)
/// and while `√V₀ − αt/2 ≥ 0`.
pub fn lemma_checkers(traj: &Trajectory, kernel: &CommKernel, decay_rate: Option<f64>) -> Result<LemmaReport> {
    if traj.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let first = &traj.states[0];
    let n = first.agents();
    let c = (2.0 * n as f64).sqrt();
    let uncontrolled = traj.controls.iter().all(|u| u.is_zero());
    let rate_at = |r: f64| kernel.rate(c * r);

    let mut report = LemmaReport {
        invariance: uncontrolled.then_some(0.0),
        ..Default::default()
    };
    let mut all = Vec::with_capacity(traj.len());
    for (state, u) in traj.states.iter().zip(&traj.controls) {
        all.push(rates(state, kernel, u));
    }

    let sqrt_v0 = all[0].sqrt_v;
    let mut integral = 0.0;
    for (k, r) in all.iter().enumerate() {
        let a = rate_at(r.sqrt_x);
        report.lyapunov_decay = report.lyapunov_decay.max(r.dv + 2.0 * a * r.v);
        if r.sqrt_v > 0.0 {
            report.sqrt_decay = report.sqrt_decay.max(r.dv / (2.0 * r.sqrt_v) + a * r.sqrt_v);
        }
        // at X = 0 the right derivative of √X is √B(v,v) = √V
        let d_sqrt_x = if r.sqrt_x > 0.0 {
            r.dx / (2.0 * r.sqrt_x)
        } else {
            r.sqrt_v
        };
        report.dispersion_growth = report.dispersion_growth.max(d_sqrt_x - r.sqrt_v);

        if k > 0 {
            let lo = all[k - 1].sqrt_x;
            let hi = r.sqrt_x;
            integral += quadrature::integrate(rate_at, lo, hi, 1e-13, 200).value;
        }
        report.integrated = report.integrated.max(r.sqrt_v + integral - sqrt_v0);

        if let Some(inv) = report.invariance.as_mut() {
            // d/dt(−γ(X)) = a(√(2NX)) d√X/dt
            *inv = inv.max(r.d_max_perp + a * d_sqrt_x);
        }
    }

    if let Some(alpha) = decay_rate {
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "decay rate must be positive, got {alpha}"
            )));
        }
        let v0 = all[0].v;
        let x0 = all[0].x;
        let x_cap = 2.0 * x0 + 2.0 * (n * n) as f64 * v0 * v0 / (alpha * alpha);
        let horizon = traj.times.last().copied().unwrap_or(0.0);
        let window_end = traj.entry_time.unwrap_or(horizon).min(2.0 * sqrt_v0 / alpha);
        let mut lin = LinearDecayReport {
            rate: alpha,
            hypothesis: 0.0,
            disagreement_bound: 0.0,
            dispersion_bound: 0.0,
            window_end,
        };
        for (t, r) in traj.times.iter().zip(&all) {
            if *t > window_end {
                break;
            }
            if *t < window_end {
                lin.hypothesis = lin.hypothesis.max(r.dv + alpha * r.sqrt_v);
            }
            let envelope = (sqrt_v0 - 0.5 * alpha * t).max(0.0);
            lin.disagreement_bound = lin.disagreement_bound.max(r.v - envelope * envelope);
            lin.dispersion_bound = lin.dispersion_bound.max(r.x - x_cap);
        }
        report.linear_decay = Some(lin);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controls::{SparseFeedback, ZeroFeedback};
    use crate::dynamics::{integrate, integrate_uncontrolled, sampling_solve, two_agent_cloud, IntegrationOptions};
    use approx::assert_relative_eq;

    fn kernel() -> CommKernel {
        CommKernel::cucker_smale(1.0, 1.0, 1.0).unwrap()
    }

    fn consensus_point() -> AgentCloud {
        AgentCloud::from_rows(
            3,
            2,
            &[0.0, 1.0, 2.0, 0.5, -1.0, 3.0],
            &[0.3, -0.2, 0.3, -0.2, 0.3, -0.2],
        )
        .unwrap()
    }

    fn spread() -> AgentCloud {
        AgentCloud::from_rows(
            4,
            2,
            &[0.1, -0.3, 1.2, 0.4, -0.7, 0.9, 0.0, -1.1],
            &[2.5, 0.2, -1.4, 0.3, 0.1, -1.6, 0.8, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn region_check_examples() {
        assert!(consensus_region_check(&consensus_point(), &kernel()).unwrap());
        assert!(!consensus_region_check(&spread(), &kernel()).unwrap());
        let heavy = CommKernel::cucker_smale(1.0, 1.0, 0.5).unwrap();
        assert!(consensus_region_check(&spread(), &heavy).is_err());
    }

    #[test]
    fn bounds_vanish_at_consensus() {
        let c = consensus_point();
        let (_, t0) = steering_time_bound(&c, &kernel(), 1.0, true).unwrap();
        assert_eq!(t0, 0.0);
        let exact = AgentCloud::from_rows(2, 1, &[0.0, 1.0], &[0.5, 0.5]).unwrap();
        assert_eq!(max_sampling_time(&exact, &kernel(), 1.0).unwrap(), f64::INFINITY);
        assert_eq!(
            consensus_number_bound(&c, &kernel(), 1.0, 5.0).unwrap(),
            ConsensusNumber::Finite(0)
        );
    }

    #[test]
    fn steering_bound_formulas() {
        let c = spread();
        let k = kernel();
        let x0 = cloud::dispersion(&c);
        let v0 = cloud::disagreement(&c);
        let (xb, t0) = steering_time_bound(&c, &k, 2.0, false).unwrap();
        assert_relative_eq!(xb, 2.0 * x0 + 256.0 * v0 * v0 / 8.0, max_relative = 1e-14);
        let g = cloud::gamma_threshold(xb, &k, 4).unwrap();
        assert_relative_eq!(t0, 2.0 * (v0.sqrt() - g), max_relative = 1e-14);
        let (xs, ts) = steering_time_bound(&c, &k, 2.0, true).unwrap();
        assert_relative_eq!(xs, 2.0 * x0 + 2.0 * 256.0 * v0 * v0 / 4.0, max_relative = 1e-14);
        assert!(ts > t0);
    }

    #[test]
    fn doubling_budget_shrinks_time_bound() {
        let c = spread();
        for sampled in [false, true] {
            let (_, a) = steering_time_bound(&c, &kernel(), 1.0, sampled).unwrap();
            let (_, b) = steering_time_bound(&c, &kernel(), 2.0, sampled).unwrap();
            assert!(b < a);
        }
    }

    #[test]
    fn sampling_time_is_the_root() {
        let c = spread();
        let k = kernel();
        let tau0 = max_sampling_time(&c, &k, 1.0).unwrap();
        assert!(tau0 > 0.0);
        let (xb, _) = steering_time_bound(&c, &k, 1.0, true).unwrap();
        let g = cloud::gamma_threshold(xb, &k, 4).unwrap();
        assert!((sampling_condition_lhs(&c, &k, 1.0, tau0) - 0.5 * g).abs() <= 1e-10);
        assert!(sampling_condition_lhs(&c, &k, 1.0, 0.5 * tau0) < 0.5 * g);
    }

    #[test]
    fn consensus_number_infinite_before_t0() {
        let c = spread();
        let b = stabilization_bounds(&c, &kernel(), 1.0, 1.0).unwrap();
        assert!(b.t0 > 1.0);
        assert_eq!(b.n_bound, ConsensusNumber::Infinite);
        let b2 = stabilization_bounds(&c, &kernel(), 1.0, 2.0 * b.t0).unwrap();
        assert_eq!(b2.n_bound, ConsensusNumber::Finite((b.t0 / b.tau0).ceil() as u64));
        assert!(ConsensusNumber::Finite(u64::MAX) < ConsensusNumber::Infinite);
    }

    #[test]
    fn batch_takes_worst_case() {
        let k = kernel();
        let samples = [spread(), consensus_point()];
        let batch = consensus_number_bound_batch(&samples, &k, 1.0, 1e9).unwrap();
        let single = stabilization_bounds(&spread(), &k, 1.0, 1e9).unwrap();
        assert_eq!(batch.t0, single.t0);
        assert_eq!(batch.tau0, single.tau0);
        assert!(consensus_number_bound_batch(&[], &k, 1.0, 1.0).is_err());
    }

    #[test]
    fn consensus_point_run_satisfies_everything() {
        let k = kernel();
        let traj = integrate_uncontrolled(&consensus_point(), &k, 2.0, 0.01).unwrap();
        let rep = lemma_checkers(&traj, &k, None).unwrap();
        assert!(rep.worst() <= 1e-14, "{rep:?}");
    }

    #[test]
    fn uncontrolled_residuals_are_small() {
        let k = kernel();
        let traj = integrate_uncontrolled(&spread(), &k, 10.0, 0.01).unwrap();
        let rep = lemma_checkers(&traj, &k, None).unwrap();
        assert!(rep.invariance.is_some());
        assert!(rep.worst() <= 1e-6, "{rep:?}");
    }

    #[test]
    fn two_agent_equality_case() {
        // for N = 2 the first inequality is an equality
        let k = kernel();
        let traj = integrate_uncontrolled(&two_agent_cloud(1.0, -2.0), &k, 3.0, 0.01).unwrap();
        let rep = lemma_checkers(&traj, &k, None).unwrap();
        assert!(rep.lyapunov_decay.abs() <= 1e-12);
    }

    #[test]
    fn sparse_sampled_run_has_linear_decay() {
        let k = kernel();
        let c = spread();
        let tau0 = max_sampling_time(&c, &k, 1.0).unwrap();
        let tau = (tau0 * 1e4).floor() / 1e4;
        let fb = SparseFeedback {
            kernel: k.clone(),
            budget: 1.0,
        };
        let opts = IntegrationOptions::sampled(5.0, tau, None).stop_at_entry(true);
        let traj = integrate(&c, &k, &fb, opts).unwrap();
        let rep = lemma_checkers(&traj, &k, Some(1.0 / 4.0)).unwrap();
        let lin = rep.linear_decay.unwrap();
        assert!(
            lin.disagreement_bound <= 1e-9 && lin.dispersion_bound <= 1e-9,
            "{lin:?}"
        );
        assert!(rep.invariance.is_none());
        let _ = sampling_solve(&c, &k, &ZeroFeedback, tau, 0.01, None).unwrap();
    }
}
