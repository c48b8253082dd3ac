//! Finite-horizon optimal control with an ℓ¹ penalty on the control:
//! adjoint equations, pointwise Hamiltonian minimization, and a damped
//! forward-backward sweep.
//!
//! The objective is `∫₀ᵀ Σᵢ‖v⊥ᵢ‖² + w Σᵢ‖uᵢ‖ dt` subject to `Σᵢ‖uᵢ‖ ≤ M`,
//! with free endpoint and no terminal cost.

use nalgebra::DMatrix;

use crate::cloud::{self, AgentCloud};
use crate::controls::{classify_norms, ControlVector, Region};
use crate::dynamics::{controlled_rhs, rk4_step, Schedule, Trajectory};
use crate::error::{Error, Result};
use crate::kernel::CommKernel;

/// Adjoint variables `(p_x, p_v)`, `N × d` each.
#[derive(Debug, Clone, PartialEq)]
pub struct Costate {
    pub px: DMatrix<f64>,
    pub pv: DMatrix<f64>,
}

impl Costate {
    pub fn zeros(agents: usize, dim: usize) -> Self {
        Self {
            px: DMatrix::zeros(agents, dim),
            pv: DMatrix::zeros(agents, dim),
        }
    }

    fn axpy(&self, h: f64, d: &Costate) -> Costate {
        Costate {
            px: &self.px + &d.px * h,
            pv: &self.pv + &d.pv * h,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.px.amax().max(self.pv.amax())
    }
}

/// Composite-trapezoid value of `∫ Σᵢ‖v⊥ᵢ‖² dt` plus `w ∫ Σᵢ‖uᵢ‖ dt`, the
/// latter exact for the control held on each step.
pub fn cost_functional(traj: &Trajectory, sparsity_weight: f64) -> f64 {
    let n = traj.states.first().map(|s| s.agents()).unwrap_or(0) as f64;
    // Σᵢ‖v⊥ᵢ‖² = N·V
    let running: f64 = traj
        .times
        .windows(2)
        .zip(traj.diagnostics.windows(2))
        .map(|(t, d)| 0.5 * (t[1] - t[0]) * n * (d[0].disagreement + d[1].disagreement))
        .sum();
    running + sparsity_weight * traj.control_effort()
}

/// Right-hand side of the adjoint equations
///
/// `ṗ_xᵢ = −(1/N) Σⱼ (a′(r)/r) (xⱼ−xᵢ) ⟨p_vⱼ−p_vᵢ, vⱼ−vᵢ⟩`,
/// `ṗ_vᵢ = −p_xᵢ − (1/N) Σⱼ a(r)(p_vⱼ−p_vᵢ) − 2vᵢ + (2/N) Σⱼ vⱼ`,
///
/// with `r = ‖xⱼ−xᵢ‖`. Pairs at coincident positions contribute nothing to
/// the first line.
pub fn adjoint_rhs(state: &AgentCloud, costate: &Costate, kernel: &CommKernel) -> Costate {
    let x = state.positions();
    let v = state.velocities();
    let (n, d) = x.shape();
    let inv_n = 1.0 / n as f64;
    let mut dpx = DMatrix::zeros(n, d);
    let mut dpv = -&costate.px - cloud::perp(v) * 2.0;
    let pv = &costate.pv;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = x.row(j) - x.row(i);
            let r = dx.norm();
            let dp = pv.row(j) - pv.row(i);
            let coupling = kernel.rate(r) * inv_n;
            // −(1/N) a (p_vⱼ − p_vᵢ) on row i, the mirror term on row j
            let mut row_i = dpv.row_mut(i);
            row_i -= &dp * coupling;
            let mut row_j = dpv.row_mut(j);
            row_j += &dp * coupling;
            if r > 0.0 {
                let dv = v.row(j) - v.row(i);
                let w = kernel.derivative_over_r(r) * dp.dot(&dv) * inv_n;
                let mut row_i = dpx.row_mut(i);
                row_i -= &dx * w;
                let mut row_j = dpx.row_mut(j);
                row_j += &dx * w;
            }
        }
    }
    Costate { px: dpx, pv: dpv }
}

/// `H = Σ⟨p_xᵢ, vᵢ⟩ + Σ⟨p_vᵢ, v̇ᵢ⟩ + Σ‖v⊥ᵢ‖² + w Σ‖uᵢ‖`.
pub fn hamiltonian(
    state: &AgentCloud,
    costate: &Costate,
    u: &ControlVector,
    kernel: &CommKernel,
    sparsity_weight: f64,
) -> f64 {
    let rhs = controlled_rhs(state, kernel, u);
    let vp = cloud::perp(state.velocities());
    costate.px.dot(&rhs.dx) + costate.pv.dot(&rhs.dv) + vp.norm_squared() + sparsity_weight * u.l1l2_norm()
}

/// Minimizer of `Σ⟨p_vᵢ, uᵢ⟩ + w Σ‖uᵢ‖` over `Σ‖uᵢ‖ ≤ M`: zero when every
/// `‖p_vᵢ‖ < w`, otherwise the whole budget on the smallest index of largest
/// `‖p_vᵢ‖`, pointing along `−p_vᵢ`.
pub fn hamiltonian_minimizer(pv: &DMatrix<f64>, sparsity_weight: f64, budget: f64) -> ControlVector {
    let (n, d) = pv.shape();
    let mut out = ControlVector::zeros(n, d, budget);
    let norms = cloud::row_norms(pv);
    let label = classify_norms(&norms, sparsity_weight);
    if label.region == Region::C1 || norms[label.maximizers[0]] == 0.0 {
        return out;
    }
    let i = label.maximizers[0];
    out.u.set_row(i, &(pv.row(i) * (-budget / norms[i])));
    out
}

/// `Σ⟨p_vᵢ, uᵢ⟩ + w Σ‖uᵢ‖` at `u` minus its minimum over `Σ‖uᵢ‖ ≤ M`.
pub fn minimization_gap(pv: &DMatrix<f64>, u: &ControlVector, sparsity_weight: f64) -> f64 {
    let objective = |c: &DMatrix<f64>| pv.dot(c) + sparsity_weight * cloud::row_norms(c).iter().sum::<f64>();
    let best = hamiltonian_minimizer(pv, sparsity_weight, u.budget);
    (objective(&u.u) - objective(&best.u)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostateLabel {
    /// every `‖p_vᵢ‖ < w`
    O1,
    /// a single `‖p_vᵢ‖ = w`, the others below
    O2,
    /// a unique largest `‖p_vᵢ‖ > w`
    O3,
    /// several tied largest `‖p_vᵢ‖ > w`
    O4,
    /// several tied largest `‖p_vᵢ‖ = w`
    O5,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostateRegion {
    pub label: CostateLabel,
    /// Indices attaining the largest `‖p_vᵢ‖`; empty on `O1`.
    pub active: Vec<usize>,
}

pub fn classify_costate_region(pv: &DMatrix<f64>, sparsity_weight: f64) -> CostateRegion {
    let label = classify_norms(&cloud::row_norms(pv), sparsity_weight);
    let tied = label.maximizers.len() > 1;
    let (label, active) = match label.region {
        Region::C1 => (CostateLabel::O1, Vec::new()),
        Region::C2 if tied => (CostateLabel::O5, label.maximizers),
        Region::C2 => (CostateLabel::O2, label.maximizers),
        Region::C3 => (CostateLabel::O3, label.maximizers),
        Region::C4 => (CostateLabel::O4, label.maximizers),
    };
    CostateRegion { label, active }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub horizon: f64,
    pub grid_points: usize,
    pub sparsity_weight: f64,
    pub budget: f64,
    pub damping: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl SweepOptions {
    pub fn new(horizon: f64, sparsity_weight: f64, budget: f64) -> Self {
        Self {
            horizon,
            grid_points: 1000,
            sparsity_weight,
            budget,
            damping: 0.3,
            max_iter: 500,
            tol: 1e-6,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon must be positive");
        }
        if self.grid_points < 100 {
            return bad("grid_points must be at least 100");
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad("damping must lie in (0, 1]");
        }
        if !(self.sparsity_weight >= 0.0) {
            return bad("sparsity_weight must be nonnegative");
        }
        if !(self.budget > 0.0) {
            return bad("budget must be positive");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        Ok(())
    }
}

/// State–costate pair produced by the sweep.
#[derive(Debug, Clone)]
pub struct Extremal {
    pub trajectory: Trajectory,
    pub costates: Vec<Costate>,
    pub cost: f64,
    pub sparsity_weight: f64,
    pub iterations: usize,
    /// Sup-norm control change of every accepted update.
    pub changes: Vec<f64>,
    /// Cost after every accepted update, starting with the zero control.
    pub costs: Vec<f64>,
    /// Damping in use when the sweep stopped.
    pub final_damping: f64,
}

impl Extremal {
    pub fn times(&self) -> &[f64] {
        &self.trajectory.times
    }

    pub fn controls(&self) -> &[ControlVector] {
        &self.trajectory.controls
    }

    /// Fraction of grid nodes where the stored control minimizes
    /// `Σ⟨p_vᵢ, uᵢ⟩ + w Σ‖uᵢ‖` over the budget ball to within `tol`.
    ///
    /// Comparing objective values rather than controls accepts every
    /// element of the minimizing set, which is not a singleton when the
    /// largest `‖p_vᵢ‖` equals `w` or is attained by several agents.
    pub fn pmp_consistency(&self, tol: f64) -> f64 {
        let nodes = self.costates.len();
        let agree = self
            .costates
            .iter()
            .zip(self.controls())
            .filter(|(p, u)| minimization_gap(&p.pv, u, self.sparsity_weight) <= tol)
            .count();
        agree as f64 / nodes as f64
    }

    /// Fraction of grid nodes with at most one nonzero agent control.
    pub fn sparse_fraction(&self) -> f64 {
        let sparse = self.controls().iter().filter(|u| u.support().len() <= 1).count();
        sparse as f64 / self.controls().len() as f64
    }

    /// Start of the last interval on which the control is identically zero,
    /// if the final applied control is zero.
    pub fn terminal_inactive_from(&self) -> Option<f64> {
        let controls = self.controls();
        let applied = &controls[..controls.len() - 1];
        if !applied.last()?.is_zero() {
            return None;
        }
        let last_active = applied.iter().rposition(|u| !u.is_zero());
        Some(match last_active {
            Some(k) => self.times()[k + 1],
            None => 0.0,
        })
    }
}

struct Forward {
    states: Vec<AgentCloud>,
    cost: f64,
}

fn forward(initial: &AgentCloud, kernel: &CommKernel, controls: &[ControlVector], h: f64, w: f64) -> Result<Forward> {
    let mut states = Vec::with_capacity(controls.len());
    states.push(initial.clone());
    let n = initial.agents() as f64;
    let mut running = 0.0;
    let mut effort = 0.0;
    let mut prev_v = cloud::disagreement(initial);
    for (k, u) in controls[..controls.len() - 1].iter().enumerate() {
        let next = rk4_step(&states[k], kernel, h, |_, _| Ok(u.clone()))?;
        if !next.is_finite() {
            return Err(Error::Integration {
                time: (k + 1) as f64 * h,
                reason: "state became non-finite".into(),
            });
        }
        let v = cloud::disagreement(&next);
        running += 0.5 * h * n * (prev_v + v);
        effort += h * u.l1l2_norm();
        prev_v = v;
        states.push(next);
    }
    Ok(Forward {
        states,
        cost: running + w * effort,
    })
}

// Hermite midpoint of the state on [t_k, t_k + h] under the control held there.
fn midpoint(a: &AgentCloud, b: &AgentCloud, kernel: &CommKernel, u: &ControlVector, h: f64) -> AgentCloud {
    let fa = controlled_rhs(a, kernel, u);
    let fb = controlled_rhs(b, kernel, u);
    let x = (a.positions() + b.positions()) * 0.5 + (fa.dx - fb.dx) * (h / 8.0);
    let v = (a.velocities() + b.velocities()) * 0.5 + (fa.dv - fb.dv) * (h / 8.0);
    AgentCloud::from_parts(x, v)
}

/// Integrate the adjoint equations backward from `p(T) = 0` with RK4.
pub fn backward(states: &[AgentCloud], controls: &[ControlVector], kernel: &CommKernel, h: f64) -> Vec<Costate> {
    let nodes = states.len();
    let (n, d) = (states[0].agents(), states[0].dim());
    let mut out = vec![Costate::zeros(n, d); nodes];
    for k in (0..nodes - 1).rev() {
        let p = &out[k + 1];
        let mid = midpoint(&states[k], &states[k + 1], kernel, &controls[k], h);
        // s = −h going from t_{k+1} to t_k
        let s = -h;
        let k1 = adjoint_rhs(&states[k + 1], p, kernel);
        let k2 = adjoint_rhs(&mid, &p.axpy(0.5 * s, &k1), kernel);
        let k3 = adjoint_rhs(&mid, &p.axpy(0.5 * s, &k2), kernel);
        let k4 = adjoint_rhs(&states[k], &p.axpy(s, &k3), kernel);
        let px = &p.px + (k1.px + k2.px * 2.0 + k3.px * 2.0 + k4.px) * (s / 6.0);
        let pv = &p.pv + (k1.pv + k2.pv * 2.0 + k3.pv * 2.0 + k4.pv) * (s / 6.0);
        out[k] = Costate { px, pv };
    }
    out
}

fn minimizers(costates: &[Costate], w: f64, budget: f64) -> Vec<ControlVector> {
    let mut h: Vec<ControlVector> = costates
        .iter()
        .map(|p| hamiltonian_minimizer(&p.pv, w, budget))
        .collect();
    // nothing is applied after the final node
    let last = h.len() - 1;
    h[last].u.fill(0.0);
    h
}

fn sup_change(a: &[ControlVector], b: &[ControlVector]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| cloud::row_norms(&(&x.u - &y.u)).into_iter().fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

/// Damped forward-backward sweep starting from the zero control.
///
/// Each iteration blends the current control with the Hamiltonian minimizer
/// of the current costate. A blend that raises the cost is rejected and the
/// damping halved. Stops when an accepted update changes the control by at
/// most `tol` (sup over nodes and agents of `‖Δuᵢ‖`).
pub fn forward_backward_solve(initial: &AgentCloud, kernel: &CommKernel, options: SweepOptions) -> Result<Extremal> {
    options.validate()?;
    let SweepOptions {
        horizon,
        grid_points,
        sparsity_weight: w,
        budget,
        max_iter,
        tol,
        ..
    } = options;
    let h = horizon / (grid_points - 1) as f64;
    let (n, d) = (initial.agents(), initial.dim());

    let mut controls = vec![ControlVector::zeros(n, d, budget); grid_points];
    let mut fwd = forward(initial, kernel, &controls, h, w)?;
    let mut costates = backward(&fwd.states, &controls, kernel, h);
    let mut target = minimizers(&costates, w, budget);
    let mut damping = options.damping;
    let mut changes = Vec::new();
    let mut costs = vec![fwd.cost];
    let mut converged = false;
    let mut iterations = 0;

    // at the zero control the minimizer may already be zero
    if sup_change(&target, &controls) <= tol {
        converged = true;
    }
    while !converged && iterations < max_iter {
        iterations += 1;
        let candidate: Vec<ControlVector> = controls
            .iter()
            .zip(&target)
            .map(|(u, t)| ControlVector {
                u: &u.u * (1.0 - damping) + &t.u * damping,
                budget,
            })
            .collect();
        let trial = forward(initial, kernel, &candidate, h, w)?;
        if trial.cost > fwd.cost + 1e-14 * fwd.cost.abs() {
            damping *= 0.5;
            continue;
        }
        let change = sup_change(&candidate, &controls);
        controls = candidate;
        fwd = trial;
        costates = backward(&fwd.states, &controls, kernel, h);
        target = minimizers(&costates, w, budget);
        changes.push(change);
        costs.push(fwd.cost);
        if change <= tol {
            converged = true;
        }
    }

    if !converged {
        return Err(Error::NotConverged {
            iterations,
            last: changes.last().copied().unwrap_or(f64::NAN),
            history: changes,
        });
    }

    let times: Vec<f64> = (0..grid_points)
        .map(|k| if k + 1 == grid_points { horizon } else { k as f64 * h })
        .collect();
    let diagnostics = fwd
        .states
        .iter()
        .map(|s| cloud::diagnostics(s, kernel))
        .collect::<Result<Vec<_>>>()?;
    let entry_time = diagnostics
        .iter()
        .position(|g| g.in_consensus_region())
        .map(|k| times[k]);
    let switch_log = times
        .iter()
        .zip(&controls)
        .map(|(&time, u)| crate::dynamics::SwitchEvent {
            time,
            active: u.active_agent(),
        })
        .collect();
    let trajectory = Trajectory {
        times,
        states: fwd.states,
        controls,
        diagnostics,
        entry_time,
        switch_log,
        step: h,
        schedule: Schedule::Sampled { tau: h },
    };
    Ok(Extremal {
        trajectory,
        costates,
        cost: fwd.cost,
        sparsity_weight: w,
        iterations,
        changes,
        costs,
        final_damping: damping,
    })
}
