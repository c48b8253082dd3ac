use std::f64::consts::FRAC_PI_2;
use std::fmt;

use flock_core::analysis::{max_sampling_time, stabilization_bounds, steering_time_bound, StabilizationBounds};
use flock_core::controllability::{augmented_kalman_rank, kalman_test, linearize_at_consensus, KalmanResult};
use flock_core::controls::{DistributedFeedback, Feedback, SparseFeedback, ZeroFeedback};
use flock_core::dynamics::{
    integrate, relative_coordinates, two_agent_invariant_residual, two_agent_kernel, IntegrationOptions, Trajectory,
};
use flock_core::optimal::{forward_backward_solve, SweepOptions};
use flock_core::{AgentCloud, CommKernel};

use crate::config::{ExperimentConfig, InitialData, SamplingTime, Strategy};
use crate::{trajectory_csv, CliError};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub iterations: usize,
    pub cost: f64,
    pub sparse_fraction: f64,
    pub pmp_consistency: f64,
    pub terminal_inactive_from: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub strategy: Strategy,
    /// Sampling time actually used, `None` for continuous feedback.
    pub tau: Option<f64>,
    pub entry_time: Option<f64>,
    pub interventions: usize,
    pub control_effort: f64,
    pub final_time: f64,
    pub final_sqrt_v: f64,
    pub final_gamma: f64,
    pub final_dispersion: f64,
    /// Missing when the kernel is not integrable or the state is aligned.
    pub bounds: Option<StabilizationBounds>,
    pub sweep: Option<SweepSummary>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or("none".to_string(), |t| t.to_string())
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "strategy={}", self.strategy.name())?;
        writeln!(f, "tau={}", opt(self.tau))?;
        writeln!(f, "entry_time={}", opt(self.entry_time))?;
        writeln!(f, "interventions={}", self.interventions)?;
        writeln!(f, "control_effort={}", self.control_effort)?;
        writeln!(f, "final_time={}", self.final_time)?;
        writeln!(f, "final_sqrtV={}", self.final_sqrt_v)?;
        writeln!(f, "final_gammaX={}", self.final_gamma)?;
        writeln!(f, "final_X={}", self.final_dispersion)?;
        if let Some(b) = &self.bounds {
            write!(f, "{}", BoundsDisplay(b))?;
        }
        if let Some(s) = &self.sweep {
            writeln!(f, "sweep_iterations={}", s.iterations)?;
            writeln!(f, "sweep_cost={}", s.cost)?;
            writeln!(f, "sweep_sparse_fraction={}", s.sparse_fraction)?;
            writeln!(f, "sweep_pmp_consistency={}", s.pmp_consistency)?;
            writeln!(f, "sweep_terminal_inactive_from={}", opt(s.terminal_inactive_from))?;
        }
        Ok(())
    }
}

struct BoundsDisplay<'a>(&'a StabilizationBounds);

impl fmt::Display for BoundsDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        writeln!(f, "bound_x_bar={}", b.x_bar)?;
        writeln!(f, "bound_t0={}", b.t0)?;
        writeln!(f, "bound_tau0={}", b.tau0)?;
        writeln!(f, "consensus_number={}", b.n_bound)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub summary: Summary,
}

fn feedback_for(config: &ExperimentConfig, kernel: &CommKernel, initial: &AgentCloud) -> Box<dyn Feedback> {
    match config.strategy {
        Strategy::Sparse => Box::new(SparseFeedback {
            kernel: kernel.clone(),
            budget: config.budget,
        }),
        Strategy::DistributedUniform => Box::new(DistributedFeedback::uniform(config.budget)),
        Strategy::DistributedProjection => Box::new(DistributedFeedback::projection(initial, config.budget)),
        Strategy::None | Strategy::Optimal => Box::new(ZeroFeedback),
    }
}

/// Execute the configured strategy and write the CSV when an output path is set.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    let kernel = config.kernel()?;
    let initial = config.initial_cloud()?;
    let mut tau = None;
    let mut sweep = None;
    let trajectory = match config.strategy {
        Strategy::Optimal => {
            let opts = SweepOptions {
                horizon: config.horizon,
                grid_points: config.grid_points,
                sparsity_weight: config.sparsity_weight,
                budget: config.budget,
                damping: config.damping,
                max_iter: config.max_iter,
                tol: config.tol,
            };
            let ext = forward_backward_solve(&initial, &kernel, opts)?;
            sweep = Some(SweepSummary {
                iterations: ext.iterations,
                cost: ext.cost,
                sparse_fraction: ext.sparse_fraction(),
                pmp_consistency: ext.pmp_consistency(config.tol),
                terminal_inactive_from: ext.terminal_inactive_from(),
            });
            ext.trajectory
        }
        strategy => {
            let fb = feedback_for(config, &kernel, &initial);
            let opts = match (strategy, config.tau) {
                (Strategy::None, _) | (_, SamplingTime::Continuous) => {
                    IntegrationOptions::continuous(config.horizon, config.step)
                }
                (_, SamplingTime::Fixed(t)) => {
                    tau = Some(t);
                    IntegrationOptions::sampled(config.horizon, t, Some(config.step))
                }
                (_, SamplingTime::Auto) => {
                    let t = max_sampling_time(&initial, &kernel, config.budget)?;
                    if !t.is_finite() {
                        return Err(CliError::Config(
                            "tau=auto is undefined for an aligned initial state".into(),
                        ));
                    }
                    tau = Some(t);
                    IntegrationOptions::sampled(config.horizon, t, Some(config.step.min(t)))
                }
            };
            integrate(&initial, &kernel, fb.as_ref(), opts.stop_at_entry(config.stop_at_entry))?
        }
    };
    let last = trajectory.final_diagnostics();
    let bounds = if kernel.is_integrable() && flock_core::cloud::disagreement(&initial) > 0.0 {
        stabilization_bounds(&initial, &kernel, config.budget, config.horizon).ok()
    } else {
        None
    };
    let summary = Summary {
        strategy: config.strategy,
        tau,
        entry_time: trajectory.entry_time,
        interventions: trajectory.interventions(),
        control_effort: trajectory.control_effort(),
        final_time: *trajectory.times.last().unwrap(),
        final_sqrt_v: last.sqrt_v(),
        final_gamma: last.gamma,
        final_dispersion: last.dispersion,
        bounds,
        sweep,
    };
    if let Some(path) = &config.output {
        trajectory_csv::write_file(&trajectory, path)?;
    }
    Ok(RunOutcome { trajectory, summary })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub strategy: Strategy,
    pub entry_time: Option<f64>,
    pub interventions: usize,
    pub control_effort: f64,
    pub final_sqrt_v: f64,
    pub final_gamma: f64,
    pub final_dispersion: f64,
}

impl CompareRow {
    pub const HEADER: &'static str =
        "strategy,entry_time,interventions,control_effort,final_sqrtV,final_gammaX,final_X";

    fn from_summary(s: &Summary) -> Self {
        CompareRow {
            strategy: s.strategy,
            entry_time: s.entry_time,
            interventions: s.interventions,
            control_effort: s.control_effort,
            final_sqrt_v: s.final_sqrt_v,
            final_gamma: s.final_gamma,
            final_dispersion: s.final_dispersion,
        }
    }
}

impl fmt::Display for CompareRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.strategy.name(),
            opt(self.entry_time),
            self.interventions,
            self.control_effort,
            self.final_sqrt_v,
            self.final_gamma,
            self.final_dispersion
        )
    }
}

/// Run several configurations on one thread each; they must share the
/// initial data, the kernel and distinct output paths.
pub fn compare(configs: &[ExperimentConfig]) -> Result<Vec<CompareRow>, CliError> {
    let first = configs
        .first()
        .ok_or_else(|| CliError::Config("nothing to compare".into()))?;
    let initial = first.initial_cloud()?;
    for c in &configs[1..] {
        if c.initial_cloud()? != initial {
            return Err(CliError::Config("compared runs have different initial data".into()));
        }
        if (c.k, c.sigma, c.beta) != (first.k, first.sigma, first.beta) {
            return Err(CliError::Config("compared runs have different kernels".into()));
        }
    }
    let outputs: Vec<_> = configs.iter().filter_map(|c| c.output.as_ref()).collect();
    for (i, p) in outputs.iter().enumerate() {
        if outputs[..i].contains(p) {
            return Err(CliError::Config(format!(
                "output {} is shared by two runs",
                p.display()
            )));
        }
    }
    let results: Vec<Result<RunOutcome, CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs.iter().map(|c| scope.spawn(move || run(c))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("run thread panicked"))
            .collect()
    });
    results
        .into_iter()
        .map(|r| r.map(|o| CompareRow::from_summary(&o.summary)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsReport {
    pub sampled: StabilizationBounds,
    pub continuous_x_bar: f64,
    pub continuous_t0: f64,
}

impl fmt::Display for BoundsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", BoundsDisplay(&self.sampled))?;
        writeln!(f, "continuous_x_bar={}", self.continuous_x_bar)?;
        writeln!(f, "continuous_t0={}", self.continuous_t0)
    }
}

pub fn bounds(config: &ExperimentConfig) -> Result<BoundsReport, CliError> {
    let kernel = config.kernel()?;
    let initial = config.initial_cloud()?;
    let sampled = stabilization_bounds(&initial, &kernel, config.budget, config.horizon)?;
    let (continuous_x_bar, continuous_t0) = steering_time_bound(&initial, &kernel, config.budget, false)?;
    Ok(BoundsReport {
        sampled,
        continuous_x_bar,
        continuous_t0,
    })
}

#[derive(Debug, Clone)]
pub struct ControllabilityReport {
    pub kalman: KalmanResult,
    pub eigenvalues: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub augmented_rank: usize,
}

impl fmt::Display for ControllabilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let k = &self.kalman;
        writeln!(f, "controllable={}", k.controllable)?;
        writeln!(f, "rank={}", k.rank)?;
        writeln!(f, "singular_values={}", list(&k.singular_values))?;
        writeln!(f, "eigenvalues={}", list(&self.eigenvalues))?;
        writeln!(f, "coefficients={}", list(&self.coefficients))?;
        writeln!(f, "distinct_eigenvalues={}", k.spectral.distinct_eigenvalues)?;
        writeln!(f, "nonzero_coefficients={}", k.spectral.nonzero_coefficients)?;
        writeln!(f, "criteria_agree={}", k.criteria_agree())?;
        writeln!(f, "augmented_rank={}", self.augmented_rank)
    }
}

/// Kalman test for the linearization at the configured positions.
pub fn controllability(config: &ExperimentConfig) -> Result<ControllabilityReport, CliError> {
    let kernel = config.kernel()?;
    let initial = config.initial_cloud()?;
    let sys = linearize_at_consensus(initial.positions(), &kernel, config.control_index)?;
    Ok(ControllabilityReport {
        kalman: kalman_test(&sys),
        eigenvalues: sys.eigenvalues.clone(),
        coefficients: sys.alpha.clone(),
        augmented_rank: augmented_kalman_rank(&sys),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub x0: f64,
    pub v0: f64,
    pub predicted_consensus: bool,
    pub entered_region: bool,
    pub max_residual: f64,
    pub final_relative: (f64, f64),
}

impl OracleReport {
    pub fn agrees(&self) -> bool {
        self.predicted_consensus == self.entered_region
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "x0={}", self.x0)?;
        writeln!(f, "v0={}", self.v0)?;
        writeln!(f, "predicted_consensus={}", self.predicted_consensus)?;
        writeln!(f, "entered_region={}", self.entered_region)?;
        writeln!(f, "agrees={}", self.agrees())?;
        writeln!(f, "max_invariant_residual={}", self.max_residual)?;
        writeln!(f, "final_x={}", self.final_relative.0)?;
        writeln!(f, "final_v={}", self.final_relative.1)
    }
}

/// Free two-agent run against the `|arctan x₀ + v₀| < π/2` criterion.
pub fn oracle(config: &ExperimentConfig) -> Result<OracleReport, CliError> {
    let InitialData::TwoAgent { x0, v0 } = config.initial else {
        return Err(CliError::Config("oracle needs generator=two-agent(x0,v0)".into()));
    };
    if (config.k, config.sigma, config.beta) != (1.0, 1.0, 1.0) {
        return Err(CliError::Config("oracle needs K = sigma = beta = 1".into()));
    }
    let traj = integrate(
        &config.initial_cloud()?,
        &two_agent_kernel(),
        &ZeroFeedback,
        IntegrationOptions::continuous(config.horizon, config.step),
    )?;
    let max_residual = traj
        .states
        .iter()
        .map(|s| {
            let (x, v) = relative_coordinates(s);
            two_agent_invariant_residual(x, v, x0, v0).abs()
        })
        .fold(0.0, f64::max);
    Ok(OracleReport {
        x0,
        v0,
        predicted_consensus: (x0.atan() + v0).abs() < FRAC_PI_2,
        entered_region: traj.entry_time.is_some(),
        max_residual,
        final_relative: relative_coordinates(traj.final_state()),
    })
}
