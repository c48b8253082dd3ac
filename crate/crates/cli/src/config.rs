//! Flat `key=value` experiment configuration.

use std::collections::BTreeMap;
use std::path::PathBuf;

use flock_core::dynamics::two_agent_cloud;
use flock_core::{AgentCloud, CommKernel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::CliError;

pub const KEYS: &[&str] = &[
    "N",
    "d",
    "K",
    "sigma",
    "beta",
    "M",
    "strategy",
    "tau",
    "h",
    "T",
    "x",
    "v",
    "generator",
    "sparsity_weight",
    "grid_points",
    "damping",
    "max_iter",
    "tol",
    "output",
    "seed",
    "control_index",
    "stop_at_entry",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    None,
    Sparse,
    DistributedUniform,
    DistributedProjection,
    Optimal,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Sparse => "sparse",
            Strategy::DistributedUniform => "distributed-uniform",
            Strategy::DistributedProjection => "distributed-projection",
            Strategy::Optimal => "optimal",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "none" => Strategy::None,
            "sparse" => Strategy::Sparse,
            "distributed-uniform" => Strategy::DistributedUniform,
            "distributed-projection" => Strategy::DistributedProjection,
            "optimal" => Strategy::Optimal,
            other => return Err(CliError::Config(format!("unknown strategy '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingTime {
    /// Feedback re-evaluated at every integrator stage.
    Continuous,
    Fixed(f64),
    /// Largest admissible sampling time of the initial state.
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialData {
    Explicit {
        x: Vec<f64>,
        v: Vec<f64>,
    },
    /// Four agents on the plane, positions equal to velocities.
    ExampleSymmetric,
    /// Twenty agents with `x_i = (cos(i+√2), cos(i+2√2))`.
    ExampleCircle20,
    TwoAgent {
        x0: f64,
        v0: f64,
    },
    /// Uniform on `[-1, 1]` from `seed`.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub agents: usize,
    pub dim: usize,
    pub k: f64,
    pub sigma: f64,
    pub beta: f64,
    pub budget: f64,
    pub strategy: Strategy,
    pub tau: SamplingTime,
    pub step: f64,
    pub horizon: f64,
    pub initial: InitialData,
    pub sparsity_weight: f64,
    pub grid_points: usize,
    pub damping: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub output: Option<PathBuf>,
    pub seed: u64,
    pub control_index: usize,
    pub stop_at_entry: bool,
}

/// Raw key/value pairs; later inserts override earlier ones.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut raw = RawConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value", lineno + 1)))?;
            raw.set(key.trim(), value.trim())?;
        }
        Ok(raw)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KEYS.contains(&key) {
            return Err(CliError::Config(format!("unknown key '{key}'")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn build(&self) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::from_raw(self)
    }
}

fn number(raw: &RawConfig, key: &str) -> Result<Option<f64>, CliError> {
    raw.get(key)
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| CliError::Config(format!("{key}: '{s}' is not a number")))
        })
        .transpose()
}

fn integer<T: std::str::FromStr>(raw: &RawConfig, key: &str) -> Result<Option<T>, CliError> {
    raw.get(key)
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| CliError::Config(format!("{key}: '{s}' is not a nonnegative integer")))
        })
        .transpose()
}

pub fn parse_array(key: &str, s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("{key}: '{}' is not a number", t.trim())))
        })
        .collect()
}

fn positive(key: &str, value: f64) -> Result<f64, CliError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(CliError::Config(format!(
            "{key} must be positive and finite, got {value}"
        )))
    }
}

fn parse_generator(s: &str) -> Result<InitialData, CliError> {
    match s {
        "example-symmetric" => return Ok(InitialData::ExampleSymmetric),
        "example-circle-20" => return Ok(InitialData::ExampleCircle20),
        "random" => return Ok(InitialData::Random),
        _ => {}
    }
    let args = s
        .strip_prefix("two-agent(")
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| CliError::Config(format!("unknown generator '{s}'")))?;
    let vals = parse_array("generator", args)?;
    match vals[..] {
        [x0, v0] if x0.is_finite() && v0.is_finite() => Ok(InitialData::TwoAgent { x0, v0 }),
        _ => Err(CliError::Config(format!(
            "two-agent expects two finite numbers, got '{args}'"
        ))),
    }
}

impl ExperimentConfig {
    fn from_raw(raw: &RawConfig) -> Result<Self, CliError> {
        let initial = match (raw.get("generator"), raw.get("x"), raw.get("v")) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
                return Err(CliError::Config(
                    "give either a generator or explicit x/v, not both".into(),
                ))
            }
            (Some(g), None, None) => parse_generator(g)?,
            (None, Some(x), Some(v)) => InitialData::Explicit {
                x: parse_array("x", x)?,
                v: parse_array("v", v)?,
            },
            (None, _, _) => {
                return Err(CliError::Config(
                    "initial data missing: set generator or both x and v".into(),
                ))
            }
        };

        // generators fix the shape; the symmetric example also fixes K = 2
        let (shape, default_k) = match &initial {
            InitialData::ExampleSymmetric => (Some((4, 2)), 2.0),
            InitialData::ExampleCircle20 => (Some((20, 2)), 1.0),
            InitialData::TwoAgent { .. } => (Some((2, 1)), 1.0),
            _ => (None, 1.0),
        };
        let n_key = integer::<usize>(raw, "N")?;
        let d_key = integer::<usize>(raw, "d")?;
        let (agents, dim) = match shape {
            Some((n, d)) => {
                if n_key.is_some_and(|k| k != n) || d_key.is_some_and(|k| k != d) {
                    return Err(CliError::Config(format!("generator fixes N={n}, d={d}")));
                }
                (n, d)
            }
            None => match (n_key, d_key) {
                (Some(n), Some(d)) => (n, d),
                _ => {
                    return Err(CliError::Config(
                        "N and d are required with explicit or random initial data".into(),
                    ))
                }
            },
        };
        if agents < 2 || dim < 1 {
            return Err(CliError::Config(format!(
                "need N >= 2 and d >= 1, got N={agents}, d={dim}"
            )));
        }
        if let InitialData::Explicit { x, v } = &initial {
            if x.len() != agents * dim || v.len() != agents * dim {
                return Err(CliError::Config(format!(
                    "x and v need N*d = {} entries, got {} and {}",
                    agents * dim,
                    x.len(),
                    v.len()
                )));
            }
            if x.iter().chain(v).any(|c| !c.is_finite()) {
                return Err(CliError::Config("initial data must be finite".into()));
            }
        }

        let strategy = Strategy::parse(raw.get("strategy").unwrap_or("none"))?;
        let tau = match raw.get("tau") {
            None => SamplingTime::Continuous,
            Some("auto") => SamplingTime::Auto,
            Some(_) => SamplingTime::Fixed(positive("tau", number(raw, "tau")?.unwrap())?),
        };
        let stop_at_entry = match raw.get("stop_at_entry") {
            None | Some("false") => false,
            Some("true") => true,
            Some(other) => return Err(CliError::Config(format!("stop_at_entry: '{other}' is not true/false"))),
        };
        let sparsity_weight = number(raw, "sparsity_weight")?.unwrap_or(0.1);
        if !(sparsity_weight >= 0.0 && sparsity_weight.is_finite()) {
            return Err(CliError::Config("sparsity_weight must be nonnegative".into()));
        }
        let damping = number(raw, "damping")?.unwrap_or(0.3);
        if !(damping > 0.0 && damping <= 1.0) {
            return Err(CliError::Config("damping must lie in (0, 1]".into()));
        }
        let grid_points = integer::<usize>(raw, "grid_points")?.unwrap_or(1000);
        if grid_points < 100 {
            return Err(CliError::Config("grid_points must be at least 100".into()));
        }
        let control_index = integer::<usize>(raw, "control_index")?.unwrap_or(0);
        if control_index >= agents {
            return Err(CliError::Config(format!(
                "control_index {control_index} out of range for N={agents}"
            )));
        }
        let config = ExperimentConfig {
            agents,
            dim,
            k: positive("K", number(raw, "K")?.unwrap_or(default_k))?,
            sigma: positive("sigma", number(raw, "sigma")?.unwrap_or(1.0))?,
            beta: positive("beta", number(raw, "beta")?.unwrap_or(1.0))?,
            budget: positive("M", number(raw, "M")?.unwrap_or(1.0))?,
            strategy,
            tau,
            step: positive("h", number(raw, "h")?.unwrap_or(1e-3))?,
            horizon: positive("T", number(raw, "T")?.unwrap_or(10.0))?,
            initial,
            sparsity_weight,
            grid_points,
            damping,
            max_iter: integer::<usize>(raw, "max_iter")?.unwrap_or(500).max(1),
            tol: positive("tol", number(raw, "tol")?.unwrap_or(1e-6))?,
            output: raw.get("output").filter(|s| !s.is_empty()).map(PathBuf::from),
            seed: integer::<u64>(raw, "seed")?.unwrap_or(0),
            control_index,
            stop_at_entry,
        };
        if let SamplingTime::Fixed(t) = config.tau {
            if t < config.step * (1.0 - 1e-9) {
                return Err(CliError::Config(format!(
                    "tau = {t} is shorter than the step h = {}",
                    config.step
                )));
            }
        }
        Ok(config)
    }

    pub fn kernel(&self) -> Result<CommKernel, CliError> {
        CommKernel::cucker_smale(self.k, self.sigma, self.beta).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn initial_cloud(&self) -> Result<AgentCloud, CliError> {
        let (n, d) = (self.agents, self.dim);
        let cloud = match &self.initial {
            InitialData::Explicit { x, v } => AgentCloud::from_rows(n, d, x, v),
            InitialData::ExampleSymmetric => {
                let p = [-1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, -1.0];
                AgentCloud::from_rows(4, 2, &p, &p)
            }
            InitialData::ExampleCircle20 => {
                let (s2, s3) = (2f64.sqrt(), 3f64.sqrt());
                let mut x = Vec::with_capacity(40);
                let mut v = Vec::with_capacity(40);
                for i in 1..=20 {
                    let i = i as f64;
                    x.extend([(i + s2).cos(), (i + 2.0 * s2).cos()]);
                    v.extend([2.0 * (i * s3 - 1.0).sin(), 2.0 * (i * s3 - 2.0).sin()]);
                }
                AgentCloud::from_rows(20, 2, &x, &v)
            }
            InitialData::TwoAgent { x0, v0 } => Ok(two_agent_cloud(*x0, *v0)),
            InitialData::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let v: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..=1.0)).collect();
                AgentCloud::from_rows(n, d, &x, &v)
            }
        };
        cloud.map_err(|e| CliError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(text: &str) -> Result<ExperimentConfig, CliError> {
        RawConfig::parse(text)?.build()
    }

    #[test]
    fn parses_generator_and_defaults() {
        let c = build("generator = example-symmetric\nstrategy = sparse\ntau = 0.01\n# comment\n").unwrap();
        assert_eq!((c.agents, c.dim), (4, 2));
        assert_eq!(c.k, 2.0);
        assert_eq!(c.strategy, Strategy::Sparse);
        assert_eq!(c.tau, SamplingTime::Fixed(0.01));
        assert_eq!(c.budget, 1.0);
        let cloud = c.initial_cloud().unwrap();
        assert_eq!(cloud.positions(), cloud.velocities());
    }

    #[test]
    fn parses_two_agent_and_explicit_arrays() {
        let c = build("generator=two-agent(0, 2)\ntau=auto").unwrap();
        assert_eq!(c.initial, InitialData::TwoAgent { x0: 0.0, v0: 2.0 });
        assert_eq!(c.tau, SamplingTime::Auto);
        let c = build("N=2\nd=1\nx=0,1\nv=1.5,-0.5\nT=3").unwrap();
        assert_eq!(c.initial_cloud().unwrap().velocities()[(1, 0)], -0.5);
    }

    #[test]
    fn circle_generator_matches_formula() {
        let c = build("generator=example-circle-20").unwrap();
        let cloud = c.initial_cloud().unwrap();
        assert_eq!(cloud.positions()[(0, 0)], (1.0 + 2f64.sqrt()).cos());
        assert_eq!(cloud.velocities()[(19, 1)], 2.0 * (20.0 * 3f64.sqrt() - 2.0).sin());
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "generator=example-symmetric\nfoo=1",
            "generator=example-symmetric\nN=5",
            "N=2\nd=1\nx=0,1\nv=1",
            "N=2\nd=1\nx=0,a\nv=1,2",
            "generator=example-symmetric\nstrategy=greedy",
            "generator=example-symmetric\nh=-1",
            "generator=two-agent(1)",
            "generator=example-symmetric\ntau=1e-4",
            "generator=example-symmetric\ncontrol_index=4",
            "strategy=none",
            "just text",
        ] {
            assert!(matches!(build(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn later_settings_override() {
        let mut raw = RawConfig::parse("generator=example-symmetric\nM=1").unwrap();
        raw.set("M", "3").unwrap();
        assert_eq!(raw.build().unwrap().budget, 3.0);
        assert!(raw.set("bogus", "1").is_err());
    }

    #[test]
    fn random_generator_is_seeded() {
        let a = build("generator=random\nN=5\nd=2\nseed=7")
            .unwrap()
            .initial_cloud()
            .unwrap();
        let b = build("generator=random\nN=5\nd=2\nseed=7")
            .unwrap()
            .initial_cloud()
            .unwrap();
        let c = build("generator=random\nN=5\nd=2\nseed=8")
            .unwrap()
            .initial_cloud()
            .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
