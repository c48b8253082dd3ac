//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::f64::consts::FRAC_PI_2;
use std::time::Instant;

use flock_cli::config::RawConfig;
use flock_cli::runner::{oracle, run};
use flock_cli::ExperimentConfig;
use flock_core::analysis::{lemma_checkers, max_sampling_time, steering_time_bound};
use flock_core::cloud::{self, gamma_by_quadrature, gamma_cs_closed_form, AgentCloud};
use flock_core::controllability::{kalman_test, linearize_at_consensus, minimal_energy_steering};
use flock_core::controls::{decay_rate_bound_check, SparseFeedback, ZeroFeedback};
use flock_core::dynamics::{
    integrate, integrate_uncontrolled, sampling_solve, two_agent_cloud, two_agent_kernel, IntegrationOptions,
};
use flock_core::optimal::{cost_functional, forward_backward_solve, SweepOptions};
use flock_core::CommKernel;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Verdict;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn config(text: &str) -> ExperimentConfig {
    RawConfig::parse(text).and_then(|r| r.build()).expect("valid config")
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

fn entry(text: &str) -> Option<f64> {
    run(&config(text)).expect("run succeeds").summary.entry_time
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> AgentCloud {
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let v: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..=1.0)).collect();
    AgentCloud::from_rows(n, d, &x, &v).unwrap()
}

fn fmt_entry(t: Option<f64>) -> String {
    t.map_or("never".into(), |t| format!("{t:.4}"))
}

fn symmetric_four() -> Verdict {
    let start = Instant::now();
    let base = "generator=example-symmetric\nM=1\ntau=0.01\nh=1e-3\nT=6\nstop_at_entry=true\n";
    let sparse = entry(&format!("{base}strategy=sparse"));
    let uniform = entry(&format!("{base}strategy=distributed-uniform"));
    let elapsed = start.elapsed().as_secs_f64();
    let ok = |t: Option<f64>| t.is_some_and(|t| within(t, 3.076, 0.02));
    verdict(
        ok(sparse) && ok(uniform) && elapsed < 5.0,
        format!(
            "sparse {} distributed-uniform {} (target 3.076 ±2%), {elapsed:.2}s",
            fmt_entry(sparse),
            fmt_entry(uniform)
        ),
    )
}

fn circle_free() -> Verdict {
    let start = Instant::now();
    let out = run(&config("generator=example-circle-20\nstrategy=none\nh=1e-3\nT=100")).expect("run succeeds");
    let elapsed = start.elapsed().as_secs_f64();
    let s = &out.summary;
    let sqrt_ok = (s.final_sqrt_v - 1.23).abs() <= 0.02;
    let gamma_ok = (s.final_gamma - 0.10).abs() <= 0.01;
    verdict(
        sqrt_ok && gamma_ok && elapsed < 30.0,
        format!(
            "sqrtV(100) {:.4} (1.23 ±0.02: {}), gamma(X(100)) {:.3e} (0.10 ±0.01: {}), {elapsed:.1}s",
            s.final_sqrt_v,
            if sqrt_ok { "ok" } else { "miss" },
            s.final_gamma,
            if gamma_ok { "ok" } else { "miss" }
        ),
    )
}

fn circle_controlled() -> Verdict {
    let base = "generator=example-circle-20\nM=1\ntau=1e-3\nh=1e-3\nT=60\nstop_at_entry=true\n";
    let sparse = entry(&format!("{base}strategy=sparse"));
    let uniform = entry(&format!("{base}strategy=distributed-uniform"));
    let ordered = matches!((sparse, uniform), (Some(s), Some(u)) if s < u);
    let sparse_band = sparse.is_some_and(|t| within(t, 22.3, 0.15));
    let uniform_band = uniform.is_some_and(|t| within(t, 27.6, 0.15));
    verdict(
        ordered && sparse_band && uniform_band,
        format!(
            "sparse {} (22.3 ±15%: {}), distributed-uniform {} (27.6 ±15%: {}), ordering {}",
            fmt_entry(sparse),
            if sparse_band { "ok" } else { "miss" },
            fmt_entry(uniform),
            if uniform_band { "ok" } else { "miss" },
            if ordered { "holds" } else { "violated" }
        ),
    )
}

fn two_agent_oracle() -> Verdict {
    let mut mismatches = 0;
    let mut worst = 0.0f64;
    let (mut inside, mut outside) = (0, 0);
    for x0 in [-3.0, -1.0, 0.0, 0.5, 2.0] {
        for c in [-1.3, -0.7, 0.7, 1.3] {
            let v0 = c * FRAC_PI_2 - f64::atan(x0);
            let r = oracle(&config(&format!("generator=two-agent({x0},{v0})\nT=50\nh=1e-3"))).expect("oracle runs");
            if r.predicted_consensus {
                inside += 1;
            } else {
                outside += 1;
            }
            if !r.agrees() {
                mismatches += 1;
            }
            worst = worst.max(r.max_residual);
        }
    }
    verdict(
        mismatches == 0 && worst <= 1e-6,
        format!(
            "{inside} consensus / {outside} non-consensus pairs, {mismatches} mismatches, max residual {worst:.2e}"
        ),
    )
}

fn lemma_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut worst_invariance = 0.0f64;
    for run in 0..50 {
        let beta = [0.6, 1.0, 1.5][run % 3];
        let k = CommKernel::cucker_smale(1.0, 1.0, beta).unwrap();
        let n = rng.random_range(2..=10);
        let d = rng.random_range(1..=3);
        let mut c = random_cloud(&mut rng, n, d);
        if run % 2 == 1 {
            // every other run starts in the invariant region
            let (x, v) = c.into_parts();
            let scale = 1e-2 * rng.random_range(0.1..1.0);
            c = AgentCloud::new(x * 0.3, v * scale).unwrap();
        }
        let traj = integrate_uncontrolled(&c, &k, 5.0, 1e-2).expect("free run");
        let rep = lemma_checkers(&traj, &k, None).expect("checkers run");
        worst = worst.max(rep.worst());
        worst_invariance = worst_invariance.max(rep.invariance.unwrap_or(f64::INFINITY));
    }
    verdict(
        worst <= 1e-6 && worst_invariance <= 1e-6,
        format!("worst lemma residual {worst:.2e}, worst invariance residual {worst_invariance:.2e} over 50 runs"),
    )
}

fn steering_bound() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let k = CommKernel::cucker_smale(1.0, 1.0, 1.0).unwrap();
    let mut late = 0;
    let mut tested = 0;
    let mut worst_ratio = 0.0f64;
    while tested < 20 {
        let n = rng.random_range(2..=5);
        let d = rng.random_range(1..=2);
        let c = random_cloud(&mut rng, n, d);
        if cloud::disagreement(&c) <= 0.0 {
            continue;
        }
        tested += 1;
        let (_, t0) = steering_time_bound(&c, &k, 1.0, true).unwrap();
        let tau0 = max_sampling_time(&c, &k, 1.0).unwrap();
        let fb = SparseFeedback {
            kernel: k.clone(),
            budget: 1.0,
        };
        let opts = IntegrationOptions::sampled(t0.max(tau0), tau0, None).stop_at_entry(true);
        let traj = integrate(&c, &k, &fb, opts).expect("sparse run");
        match traj.entry_time {
            Some(t) if t <= t0 => worst_ratio = worst_ratio.max(if t0 > 0.0 { t / t0 } else { 0.0 }),
            _ => late += 1,
        }
    }
    verdict(
        late == 0,
        format!("{late} of 20 runs missed the bound; largest entry/T0 {worst_ratio:.3}"),
    )
}

fn instantaneous_optimality() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut violations = 0;
    for trial in 0..1000 {
        let n = rng.random_range(2..=10);
        let d = rng.random_range(1..=3);
        let c = random_cloud(&mut rng, n, d);
        let m = rng.random_range(0.1..5.0);
        let mut alloc: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        if trial % 10 == 0 {
            // all budget on one agent
            alloc.iter_mut().for_each(|a| *a = 0.0);
            alloc[rng.random_range(0..n)] = 1.0;
        }
        let total: f64 = alloc.iter().sum::<f64>().max(f64::MIN_POSITIVE);
        let fill = rng.random_range(0.0..=1.0);
        let alloc: Vec<f64> = alloc.iter().map(|a| a * m * fill / total).collect();
        let (achieved, best) = decay_rate_bound_check(&c, &alloc, m);
        // rounding of the two sums only
        if achieved > best * (1.0 + 4.0 * f64::EPSILON) {
            violations += 1;
        }
    }
    verdict(violations == 0, format!("{violations} violations in 1000 pairs"))
}

fn kalman_suite() -> Verdict {
    let k = CommKernel::cucker_smale(1.0, 1.0, 1.0).unwrap();
    let h = 3f64.sqrt() / 2.0;
    let triangle = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.5, h]);
    let s = 1.0 / 2f64.sqrt();
    let tetra = DMatrix::from_row_slice(4, 3, &[s, 0.0, -0.5, -s, 0.0, -0.5, 0.0, s, 0.5, 0.0, -s, 0.5]);
    let mut disagreements = 0;
    let mut equal_ok = true;
    for x in [&triangle, &tetra] {
        for i in 0..x.nrows() {
            let r = kalman_test(&linearize_at_consensus(x, &k, i).unwrap());
            equal_ok &= !r.controllable;
            disagreements += usize::from(!r.criteria_agree());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let mut controllable = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(1..=3);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..=1.0));
        let i = rng.random_range(0..n);
        let r = kalman_test(&linearize_at_consensus(&x, &k, i).unwrap());
        controllable += usize::from(r.controllable);
        disagreements += usize::from(!r.criteria_agree());
    }
    verdict(
        equal_ok && controllable >= 99 && disagreements == 0,
        format!(
            "equal-distance cases uncontrollable: {equal_ok}; random controllable {controllable}/100; criteria disagree on {disagreements}"
        ),
    )
}

fn minimal_energy() -> Verdict {
    let k = CommKernel::cucker_smale(1.0, 1.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 10 {
        let n = rng.random_range(2..=4);
        let d = rng.random_range(1..=2);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..=1.0));
        let sys = linearize_at_consensus(&x, &k, rng.random_range(0..n)).unwrap();
        if !kalman_test(&sys).controllable {
            continue;
        }
        let v0 = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1e-3..=1e-3));
        let v1 = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1e-3..=1e-3));
        let ctl = minimal_energy_steering(&sys, &v0, &v1, 2.0).expect("controllable system");
        let (_, v) = ctl.simulate_linear(&DMatrix::zeros(n, d), &v0, 4000);
        worst = worst.max((v - &v1).norm() / v1.norm());
        done += 1;
    }
    verdict(
        worst <= 1e-6,
        format!("worst relative miss {worst:.2e} over 10 targets"),
    )
}

fn sweep() -> Verdict {
    let k = two_agent_kernel();
    let c = two_agent_cloud(0.0, 2.0);
    let opts = SweepOptions {
        grid_points: 2000,
        ..SweepOptions::new(2.0, 0.1, 1.0)
    };
    let ext = match forward_backward_solve(&c, &k, opts) {
        Ok(e) => e,
        Err(e) => return verdict(false, format!("sweep failed: {e}")),
    };
    let h = 2.0 / 1999.0;
    let last_change = *ext.changes.last().unwrap_or(&f64::INFINITY);
    let zero = integrate(&c, &k, &ZeroFeedback, IntegrationOptions::continuous(2.0, h)).expect("free run");
    let fb = SparseFeedback {
        kernel: k.clone(),
        budget: 1.0,
    };
    let sparse = sampling_solve(&c, &k, &fb, h, 2.0, Some(h)).expect("sparse run");
    let zero_cost = cost_functional(&zero, 0.1);
    let sparse_cost = cost_functional(&sparse, 0.1);
    let terminal = ext.terminal_inactive_from();
    let pass = last_change <= 1e-6
        && ext.sparse_fraction() >= 0.99
        && terminal.is_some_and(|t| t < 2.0)
        && ext.cost <= zero_cost
        && ext.cost <= sparse_cost;
    verdict(
        pass,
        format!(
            "{} iterations, last change {last_change:.1e}, sparse at {:.2}% of nodes, u = 0 from t = {}, cost {:.4} vs zero {:.4} vs sparse feedback {:.4}",
            ext.iterations,
            100.0 * ext.sparse_fraction(),
            terminal.map_or("never".into(), |t| format!("{t:.3}")),
            ext.cost,
            zero_cost,
            sparse_cost
        ),
    )
}

fn gamma_forms() -> Verdict {
    let mut worst = 0.0f64;
    for (kk, sigma, beta, n) in [(1.0, 1.0, 1.0, 20), (2.0, 1.0, 1.0, 4)] {
        let kernel = CommKernel::cucker_smale(kk, sigma, beta).unwrap();
        for x in [0.0, 0.1, 1.0, 10.0, 100.0] {
            let closed = gamma_cs_closed_form(x, kk, sigma, n);
            let quad = gamma_by_quadrature(x, &kernel, n).unwrap();
            worst = worst.max((closed - quad).abs() / closed.abs());
        }
    }
    verdict(worst <= 1e-8, format!("worst relative gap {worst:.2e}"))
}

fn main() {
    let criteria: [(&str, Check); 11] = [
        ("four-agent symmetric example, entry times", symmetric_four),
        ("twenty-agent free evolution", circle_free),
        ("twenty-agent sparse vs distributed", circle_controlled),
        ("two-agent oracle", two_agent_oracle),
        ("lemma residuals on free runs", lemma_suite),
        ("sampled steering-time bound", steering_bound),
        ("instantaneous optimality of the sparse rate", instantaneous_optimality),
        ("Kalman test", kalman_suite),
        ("minimal-energy steering", minimal_energy),
        ("forward-backward sweep", sweep),
        ("threshold closed form vs quadrature", gamma_forms),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = match std::panic::catch_unwind(check) {
            Ok(v) => v,
            Err(_) => verdict(false, "panicked".into()),
        };
        failed += usize::from(!v.pass);
        println!(
            "criterion {:>2} {}: {} ({})",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            name,
            v.detail
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
