//! Right-hand sides of the alignment dynamics and a fixed-step RK4 driver.
//!
//! A run is driven by a [`Feedback`] under a [`Schedule`]: continuous
//! feedbacks are re-evaluated at every Runge–Kutta stage, sampled feedbacks
//! are frozen on each interval `[kτ, (k+1)τ)` at the value computed from the
//! state at `kτ`.

use nalgebra::DMatrix;

use crate::cloud::{self, AgentCloud, Diagnostics};
use crate::controls::{ControlVector, Feedback, ZeroFeedback};
use crate::error::{Error, Result};
use crate::kernel::CommKernel;

/// Any coordinate beyond this aborts the integration.
pub const BLOW_UP_LIMIT: f64 = 1e12;
/// Entry times are refined by bisection at least to this accuracy.
pub const ENTRY_TIME_TOL: f64 = 1e-4;
/// Largest inner step used when none is given.
pub const DEFAULT_MAX_STEP: f64 = 1e-2;

/// `(ẋ, v̇)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    pub dx: DMatrix<f64>,
    pub dv: DMatrix<f64>,
}

/// `ẋᵢ = vᵢ`, `v̇ᵢ = (1/N) Σⱼ a(‖xⱼ−xᵢ‖)(vⱼ−vᵢ)`.
pub fn uncontrolled_rhs(cloud: &AgentCloud, kernel: &CommKernel) -> StateDerivative {
    let x = cloud.positions();
    let v = cloud.velocities();
    let (n, d) = x.shape();
    let xs = x.as_slice();
    let vs = v.as_slice();
    let mut dv = DMatrix::zeros(n, d);
    let inv_n = 1.0 / n as f64;
    {
        let out = dv.as_mut_slice();
        for i in 0..n {
            for j in (i + 1)..n {
                let mut r2 = 0.0;
                for k in 0..d {
                    let diff = xs[k * n + j] - xs[k * n + i];
                    r2 += diff * diff;
                }
                let w = kernel.rate(r2.sqrt()) * inv_n;
                for k in 0..d {
                    let diff = vs[k * n + j] - vs[k * n + i];
                    out[k * n + i] += w * diff;
                    out[k * n + j] -= w * diff;
                }
            }
        }
    }
    StateDerivative { dx: v.clone(), dv }
}

/// `(v, −L_x v)`, the matrix form of the same dynamics.
pub fn matrix_form_rhs(cloud: &AgentCloud, kernel: &CommKernel) -> StateDerivative {
    let l = cloud::laplacian(cloud, kernel);
    StateDerivative {
        dx: cloud.velocities().clone(),
        dv: -(l * cloud.velocities()),
    }
}

/// Uncontrolled dynamics plus `uᵢ` added to `v̇ᵢ`.
pub fn controlled_rhs(cloud: &AgentCloud, kernel: &CommKernel, u: &ControlVector) -> StateDerivative {
    let mut rhs = uncontrolled_rhs(cloud, kernel);
    rhs.dv += &u.u;
    rhs
}

fn offset(base: &AgentCloud, k: &StateDerivative, h: f64) -> AgentCloud {
    AgentCloud::from_parts(base.positions() + &k.dx * h, base.velocities() + &k.dv * h)
}

/// One classical RK4 step; `control` supplies the input at each stage.
pub(crate) fn rk4_step<C>(state: &AgentCloud, kernel: &CommKernel, h: f64, mut control: C) -> Result<AgentCloud>
where
    C: FnMut(&AgentCloud, f64) -> Result<ControlVector>,
{
    let f = |s: &AgentCloud, u: &ControlVector| controlled_rhs(s, kernel, u);
    let k1 = f(state, &control(state, 0.0)?);
    let s2 = offset(state, &k1, 0.5 * h);
    let k2 = f(&s2, &control(&s2, 0.5)?);
    let s3 = offset(state, &k2, 0.5 * h);
    let k3 = f(&s3, &control(&s3, 0.5)?);
    let s4 = offset(state, &k3, h);
    let k4 = f(&s4, &control(&s4, 1.0)?);
    let w = h / 6.0;
    let x = state.positions() + (k1.dx + k2.dx * 2.0 + k3.dx * 2.0 + k4.dx) * w;
    let v = state.velocities() + (k1.dv + k2.dv * 2.0 + k3.dv * 2.0 + k4.dv) * w;
    Ok(AgentCloud::from_parts(x, v))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// Feedback evaluated at every RK4 stage.
    Continuous,
    /// Feedback frozen over intervals of length `tau`.
    Sampled { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationOptions {
    pub horizon: f64,
    pub step: f64,
    pub schedule: Schedule,
    /// End the run at the first grid point inside the consensus region.
    pub stop_at_entry: bool,
}

impl IntegrationOptions {
    pub fn continuous(horizon: f64, step: f64) -> Self {
        Self {
            horizon,
            step,
            schedule: Schedule::Continuous,
            stop_at_entry: false,
        }
    }

    /// Sampled run; the inner step defaults to `min(τ/10, 1e-2)` and is
    /// shrunk so that `τ` is an integer multiple of it.
    pub fn sampled(horizon: f64, tau: f64, step: Option<f64>) -> Self {
        let requested = step.unwrap_or((tau / 10.0).min(DEFAULT_MAX_STEP));
        let substeps = (tau / requested - 1e-9).ceil().max(1.0);
        Self {
            horizon,
            step: tau / substeps,
            schedule: Schedule::Sampled { tau },
            stop_at_entry: false,
        }
    }

    pub fn stop_at_entry(mut self, stop: bool) -> Self {
        self.stop_at_entry = stop;
        self
    }

    fn validate(&self) -> Result<usize> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step must be positive, got {}",
                self.step
            )));
        }
        match self.schedule {
            Schedule::Continuous => Ok(1),
            Schedule::Sampled { tau } => {
                if !(tau > 0.0 && tau.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "sampling time must be positive, got {tau}"
                    )));
                }
                let ratio = tau / self.step;
                let substeps = ratio.round();
                if substeps < 1.0 || (ratio - substeps).abs() > 1e-6 * ratio {
                    return Err(Error::InvalidArgument(format!(
                        "sampling time {tau} is not a multiple of the step {}",
                        self.step
                    )));
                }
                Ok(substeps as usize)
            }
        }
    }
}

/// `(time, active agent)` at a decision instant of the feedback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchEvent {
    pub time: f64,
    pub active: Option<usize>,
}

/// Discrete realization of a run. Immutable once built.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<AgentCloud>,
    /// Control applied on `[times[k], times[k+1])`.
    pub controls: Vec<ControlVector>,
    pub diagnostics: Vec<Diagnostics>,
    pub entry_time: Option<f64>,
    pub switch_log: Vec<SwitchEvent>,
    pub step: f64,
    pub schedule: Schedule,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &AgentCloud {
        self.states.last().expect("trajectory has at least one point")
    }

    pub fn final_diagnostics(&self) -> &Diagnostics {
        self.diagnostics.last().expect("trajectory has at least one point")
    }

    /// Σ over decision instants where the set of controlled agents changes
    /// of the number of controlled agents afterwards.
    pub fn interventions(&self) -> usize {
        let mut count = 0;
        let mut previous: Vec<usize> = Vec::new();
        let last = self.controls.len().saturating_sub(1);
        for (k, u) in self.controls.iter().enumerate() {
            // the control stored at the final node is never applied
            if k == last && k > 0 {
                break;
            }
            let support = u.support();
            if support != previous {
                count += support.len();
                previous = support;
            }
        }
        count
    }

    /// `∫ Σᵢ‖uᵢ‖ dt` with the control held on each step.
    pub fn control_effort(&self) -> f64 {
        self.times
            .windows(2)
            .zip(&self.controls)
            .map(|(t, u)| (t[1] - t[0]) * u.l1l2_norm())
            .sum()
    }
}

fn check_state(state: &AgentCloud, time: f64) -> Result<()> {
    if !state.is_finite() {
        return Err(Error::Integration {
            time,
            reason: "state became non-finite".into(),
        });
    }
    if state.max_abs() > BLOW_UP_LIMIT {
        return Err(Error::Integration {
            time,
            reason: format!("state exceeded {BLOW_UP_LIMIT:e}"),
        });
    }
    Ok(())
}

fn entry_gap(diag: &Diagnostics) -> f64 {
    diag.sqrt_v() - diag.gamma
}

/// Integrate the controlled dynamics from `initial`.
pub fn integrate(
    initial: &AgentCloud,
    kernel: &CommKernel,
    feedback: &dyn Feedback,
    options: IntegrationOptions,
) -> Result<Trajectory> {
    let substeps = options.validate()?;
    let h = options.step;
    let horizon = options.horizon;
    let n_steps = ((horizon / h) - 1e-9).ceil().max(1.0) as usize;
    let sampled = matches!(options.schedule, Schedule::Sampled { .. });

    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut controls = Vec::with_capacity(n_steps + 1);
    let mut diagnostics = Vec::with_capacity(n_steps + 1);
    let mut switch_log = Vec::new();

    let mut state = initial.clone();
    let mut diag = cloud::diagnostics(&state, kernel)?;
    let mut entry_time = if entry_gap(&diag) <= 0.0 { Some(0.0) } else { None };
    let mut held = feedback.control(&state)?;
    switch_log.push(SwitchEvent {
        time: 0.0,
        active: held.active_agent(),
    });

    let mut t = 0.0;
    times.push(t);
    states.push(state.clone());
    controls.push(held.clone());
    diagnostics.push(diag);

    if options.stop_at_entry && entry_time.is_some() {
        return Ok(Trajectory {
            times,
            states,
            controls,
            diagnostics,
            entry_time,
            switch_log,
            step: h,
            schedule: options.schedule,
        });
    }

    for k in 0..n_steps {
        let dt = if k + 1 == n_steps { horizon - t } else { h };
        let step = |from: &AgentCloud, len: f64| -> Result<AgentCloud> {
            if sampled {
                rk4_step(from, kernel, len, |_, _| Ok(held.clone()))
            } else {
                rk4_step(from, kernel, len, |s, _| feedback.control(s))
            }
        };
        let next = step(&state, dt)?;
        let t_next = if k + 1 == n_steps { horizon } else { (k + 1) as f64 * h };
        check_state(&next, t_next)?;
        let next_diag = cloud::diagnostics(&next, kernel)?;

        if entry_time.is_none() && entry_gap(&next_diag) <= 0.0 {
            // bisection on √V − γ(X) inside the bracketing step
            let (mut lo, mut hi) = (0.0, dt);
            while hi - lo > (ENTRY_TIME_TOL * 1e-6).max(1e-14 * (1.0 + t)) {
                let mid = 0.5 * (lo + hi);
                let probe = step(&state, mid)?;
                if entry_gap(&cloud::diagnostics(&probe, kernel)?) <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            entry_time = Some(t + hi);
        }

        state = next;
        diag = next_diag;
        t = t_next;
        let decision = !sampled || (k + 1) % substeps == 0;
        if decision {
            held = feedback.control(&state)?;
            switch_log.push(SwitchEvent {
                time: t,
                active: held.active_agent(),
            });
        }
        times.push(t);
        states.push(state.clone());
        controls.push(held.clone());
        diagnostics.push(diag);

        if options.stop_at_entry && entry_time.is_some() {
            break;
        }
    }

    Ok(Trajectory {
        times,
        states,
        controls,
        diagnostics,
        entry_time,
        switch_log,
        step: h,
        schedule: options.schedule,
    })
}

/// Sampling solution with sampling time `tau`.
pub fn sampling_solve(
    initial: &AgentCloud,
    kernel: &CommKernel,
    feedback: &dyn Feedback,
    tau: f64,
    horizon: f64,
    step: Option<f64>,
) -> Result<Trajectory> {
    integrate(
        initial,
        kernel,
        feedback,
        IntegrationOptions::sampled(horizon, tau, step),
    )
}

/// Free evolution.
pub fn integrate_uncontrolled(
    initial: &AgentCloud,
    kernel: &CommKernel,
    horizon: f64,
    step: f64,
) -> Result<Trajectory> {
    integrate(
        initial,
        kernel,
        &ZeroFeedback,
        IntegrationOptions::continuous(horizon, step),
    )
}

/// `(v + arctan x) − (v₀ + arctan x₀)` in relative coordinates of the
/// two-agent system `ẋ = v`, `v̇ = −v/(1+x²)`; zero along exact solutions.
pub fn two_agent_invariant_residual(x: f64, v: f64, x0: f64, v0: f64) -> f64 {
    (v + x.atan()) - (v0 + x0.atan())
}

/// Two agents on the line with relative state `(x0, v0)` and zero means.
///
/// Paired with [`two_agent_kernel`] the relative coordinates follow
/// `ẋ = v`, `v̇ = −v/(1+x²)`.
pub fn two_agent_cloud(x0: f64, v0: f64) -> AgentCloud {
    AgentCloud::from_parts(
        DMatrix::from_row_slice(2, 1, &[0.5 * x0, -0.5 * x0]),
        DMatrix::from_row_slice(2, 1, &[0.5 * v0, -0.5 * v0]),
    )
}

/// `a(r) = 1/(1+r²)`.
pub fn two_agent_kernel() -> CommKernel {
    CommKernel::CuckerSmale {
        k: 1.0,
        sigma: 1.0,
        beta: 1.0,
    }
}

/// Relative `(x₁−x₂, v₁−v₂)` of a two-agent, one-dimensional cloud.
pub fn relative_coordinates(cloud: &AgentCloud) -> (f64, f64) {
    let x = cloud.positions();
    let v = cloud.velocities();
    (x[(0, 0)] - x[(1, 0)], v[(0, 0)] - v[(1, 0)])
}
