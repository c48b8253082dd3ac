use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flock_cli::config::{RawConfig, Strategy};
use flock_cli::runner::{bounds, compare, controllability, oracle, run, CompareRow};
use flock_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "flock", about = "Cucker-Smale alignment experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one strategy and print its summary.
    Simulate(Settings),
    /// Run several strategies on the same initial data.
    Compare {
        #[command(flatten)]
        settings: Settings,
        /// Extra config files, one run each (flags apply to all).
        #[arg(long = "with")]
        with: Vec<PathBuf>,
        /// Comma-separated strategies applied to the base config.
        #[arg(long)]
        strategies: Option<String>,
    },
    /// Print the steering-time and sampling-time bounds.
    Bounds(Settings),
    /// Kalman report for the linearization at the configured positions.
    Controllability(Settings),
    /// Forward-backward sweep for the penalized optimal control.
    Optimal(Settings),
    /// Two-agent free run against the analytic criterion.
    Oracle(Settings),
}

/// `--config FILE` followed by per-key overrides.
#[derive(Args, Clone)]
struct Settings {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "N")]
    n: Option<String>,
    #[arg(long = "d")]
    d: Option<String>,
    #[arg(long = "K")]
    k: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long = "M")]
    m: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    h: Option<String>,
    #[arg(long = "T")]
    t: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    x: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    v: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    generator: Option<String>,
    #[arg(long = "sparsity_weight")]
    sparsity_weight: Option<String>,
    #[arg(long = "grid_points")]
    grid_points: Option<String>,
    #[arg(long)]
    damping: Option<String>,
    #[arg(long = "max_iter")]
    max_iter: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    #[arg(long)]
    output: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "control_index")]
    control_index: Option<String>,
    #[arg(long = "stop_at_entry")]
    stop_at_entry: Option<String>,
}

impl Settings {
    fn overrides(&self) -> [(&'static str, &Option<String>); 22] {
        [
            ("N", &self.n),
            ("d", &self.d),
            ("K", &self.k),
            ("sigma", &self.sigma),
            ("beta", &self.beta),
            ("M", &self.m),
            ("strategy", &self.strategy),
            ("tau", &self.tau),
            ("h", &self.h),
            ("T", &self.t),
            ("x", &self.x),
            ("v", &self.v),
            ("generator", &self.generator),
            ("sparsity_weight", &self.sparsity_weight),
            ("grid_points", &self.grid_points),
            ("damping", &self.damping),
            ("max_iter", &self.max_iter),
            ("tol", &self.tol),
            ("output", &self.output),
            ("seed", &self.seed),
            ("control_index", &self.control_index),
            ("stop_at_entry", &self.stop_at_entry),
        ]
    }

    fn apply(&self, raw: &mut RawConfig) -> Result<(), CliError> {
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                raw.set(key, v)?;
            }
        }
        Ok(())
    }

    fn raw(&self) -> Result<RawConfig, CliError> {
        let mut raw = match &self.config {
            Some(path) => RawConfig::load(path)?,
            None => RawConfig::default(),
        };
        self.apply(&mut raw)?;
        Ok(raw)
    }

    fn build(&self) -> Result<ExperimentConfig, CliError> {
        self.raw()?.build()
    }
}

fn suffixed(path: &str, tag: &str) -> String {
    let p = std::path::Path::new(path);
    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("trajectory");
    let name = match p.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}-{tag}.{ext}"),
        None => format!("{stem}-{tag}"),
    };
    p.with_file_name(name).to_string_lossy().into_owned()
}

fn compare_configs(
    settings: &Settings,
    with: &[PathBuf],
    strategies: Option<&str>,
) -> Result<Vec<ExperimentConfig>, CliError> {
    let base = settings.raw()?;
    let mut configs = Vec::new();
    match strategies {
        Some(list) => {
            for name in list.split(',').map(str::trim) {
                Strategy::parse(name)?;
                let mut raw = base.clone();
                raw.set("strategy", name)?;
                if let Some(out) = base.get("output").filter(|o| !o.is_empty()) {
                    raw.set("output", &suffixed(out, name))?;
                }
                configs.push(raw.build()?);
            }
        }
        None => configs.push(base.build()?),
    }
    for path in with {
        let mut raw = RawConfig::load(path)?;
        settings.apply(&mut raw)?;
        configs.push(raw.build()?);
    }
    if configs.len() < 2 {
        return Err(CliError::Config(
            "compare needs --strategies or at least one --with file".into(),
        ));
    }
    Ok(configs)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(s) => print!("{}", run(&s.build()?)?.summary),
        Command::Compare {
            settings,
            with,
            strategies,
        } => {
            let rows = compare(&compare_configs(&settings, &with, strategies.as_deref())?)?;
            println!("{}", CompareRow::HEADER);
            for row in rows {
                println!("{row}");
            }
        }
        Command::Bounds(s) => print!("{}", bounds(&s.build()?)?),
        Command::Controllability(s) => print!("{}", controllability(&s.build()?)?),
        Command::Optimal(s) => {
            let mut raw = s.raw()?;
            raw.set("strategy", "optimal")?;
            print!("{}", run(&raw.build()?)?.summary);
        }
        Command::Oracle(s) => print!("{}", oracle(&s.build()?)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flock: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
