//! Quick self-checks shipped with the library (the `verify` command).

use rand::Rng;

use crate::baselines::{rvi_solve, solve_optimal_stopping, RviOptions, StoppingOptions};
use crate::bound::{check_capacity, latency_rate_threshold, scenario_bound, threshold_curves, CurveMethod};
use crate::de::{resolve, CategoricalPolicy};
use crate::env::ExogenousRng;
use crate::error::Result;
use crate::gradcheck::{dqn_loss_error, ppo_surrogate_error};
use crate::presets::{build_preset, preset, PRESET_NAMES};
use crate::rng::{stream, Stream};
use crate::trainer::{evaluate_policy, init_agents, DeMappoPolicy, EvalOptions, Resolver, SchedulingPolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

type Check = fn() -> Result<(bool, String)>;

const CHECKS: [(&str, Check); 7] = [
    ("gradients", gradients),
    ("presets", presets),
    ("resolver", resolver),
    ("constraints", constraints),
    ("bound", bound),
    ("stopping", stopping),
    ("rvi", rvi),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check; an error inside a check counts as a failure.
pub fn run_all() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, check)| match check() {
            Ok((pass, detail)) => CheckResult { name, pass, detail },
            Err(e) => CheckResult { name, pass: false, detail: format!("{} error: {e}", e.kind()) },
        })
        .collect()
}

fn gradients() -> Result<(bool, String)> {
    let ppo = (0..20).map(ppo_surrogate_error).fold(0.0, f64::max);
    let dqn = (0..20).map(dqn_loss_error).fold(0.0, f64::max);
    Ok((ppo < 1e-5 && dqn < 1e-5, format!("max relative error surrogate {ppo:.2e}, DQN {dqn:.2e}")))
}

fn presets() -> Result<(bool, String)> {
    let mut stale = Vec::new();
    for name in PRESET_NAMES {
        if preset(name)? != build_preset(name)? {
            stale.push(name);
        }
    }
    Ok((stale.is_empty(), if stale.is_empty() { "all presets match their seeds".into() } else { format!("stale: {stale:?}") }))
}

fn resolver() -> Result<(bool, String)> {
    let split = vec![CategoricalPolicy::new(vec![0.0, 0.5, 0.5])?; 2];
    let mut order = stream(1, Stream::DeOrder);
    let mut sample = stream(1, Stream::DeSample);
    let draws = 100_000;
    let mut first = 0usize;
    for _ in 0..draws {
        let r = resolve(&split, &mut order, &mut sample)?;
        if r.joint.choices == [1, 2] {
            first += 1;
        }
    }
    let p = first as f64 / draws as f64;
    let mut rng = stream(2, Stream::MonteCarlo);
    let mut duplicates = 0;
    for _ in 0..10_000 {
        let m = rng.random_range(2..6);
        let n = rng.random_range(1..5);
        let policies = (0..m)
            .map(|_| {
                let raw: Vec<f64> = (0..=n).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = raw.iter().sum();
                CategoricalPolicy::new(raw.iter().map(|x| x / s).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let c = resolve(&policies, &mut order, &mut sample)?.joint.choices;
        let mut busy: Vec<usize> = c.into_iter().filter(|&a| a > 0).collect();
        let before = busy.len();
        busy.sort_unstable();
        busy.dedup();
        duplicates += before - busy.len();
    }
    Ok(((p - 0.5).abs() <= 0.01 && duplicates == 0, format!("P(1,2) = {p:.4}; {duplicates} duplicate starts in 10000 random draws")))
}

fn constraints() -> Result<(bool, String)> {
    let p = preset("S5")?;
    let cfg = p.env();
    let agents = init_agents(&p.train)?;
    let mut policy = DeMappoPolicy::new(&agents, Resolver::DistributionEmbedding, 1);
    let mut exo = ExogenousRng::with_seed(cfg, 1);
    let mut state = cfg.init_state();
    let slots = 10_000;
    let mut log = Vec::with_capacity(slots);
    for _ in 0..slots {
        let action = policy.act(cfg, &state)?;
        // `step` rejects any infeasible action with an error.
        state = cfg.step(&state, &action, &mut exo)?.0;
        log.push(action);
    }
    let report = check_capacity(&log, &cfg.duration_table);
    Ok((report.feasible, format!("{slots} S5 slots feasible; max channel load {:.3}", report.loads.iter().fold(0.0, |a: f64, &b| a.max(b)))))
}

fn bound() -> Result<(bool, String)> {
    let p = preset("S1")?.with_v(0.0);
    let lambda = p.env().arrival_rates[0];
    let curves = threshold_curves(p.env(), 0.01, CurveMethod::Exact)?;
    let b = scenario_bound(p.env(), &curves)?.bound;
    let f1 = latency_rate_threshold(lambda, 1.0, 1.0, CurveMethod::Exact)?;
    Ok(((b + lambda).abs() < 1e-9 && (f1 + lambda).abs() < 1e-9, format!("S1 bound at V=0 {b:.6}, f(1) {f1:.6}, expected {:.6}", -lambda)))
}

fn stopping() -> Result<(bool, String)> {
    let p = preset("S1")?;
    let sol = solve_optimal_stopping(p.env(), &StoppingOptions::default())?;
    let mut policy = sol.policy;
    let eval = evaluate_policy(&mut policy, p.env(), &EvalOptions::new(100_000, 3))?;
    let ok = (eval.avg_reward - sol.value).abs() <= 3.0 * eval.reward_stderr;
    Ok((
        ok,
        format!(
            "threshold {} value {:.4}; simulated {:.4} +- {:.4}",
            policy.threshold, sol.value, eval.avg_reward, eval.reward_stderr
        ),
    ))
}

fn rvi() -> Result<(bool, String)> {
    let p = preset("S2")?;
    let cap = p.rvi_cap.unwrap_or(10);
    let mut policy = rvi_solve(p.env(), &RviOptions { cap, ..RviOptions::default() })?;
    let gain = policy.gain;
    let eval = evaluate_policy(&mut policy, p.env(), &EvalOptions::new(100_000, 3))?;
    let rel = (eval.avg_reward - gain).abs() / gain.abs();
    Ok((rel < 0.01, format!("cap {cap} gain {gain:.4}; simulated {:.4} ({:.2}% apart)", eval.avg_reward, 100.0 * rel)))
}
