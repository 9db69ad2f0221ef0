//! `mcsched`: batch front end for training runs, baselines, bound
//! computation and tradeoff sweeps. Every command writes CSV files plus a
//! `manifest.json` into `--out`.

mod manifest;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mcsched::baselines::{
    extract_switch_curve, rvi_solve, solve_optimal_stopping, write_switch_curve_csv, RoundRobin, RviOptions,
    StoppingOptions,
};
use mcsched::bound::{
    dqn_curve, scenario_bound, threshold_curves, write_curves_csv, write_sweep_csv, BoundSolution, CurveMethod,
    DqnConfig, LatencyRateCurve, SweepRow,
};
use mcsched::env::EnvConfig;
use mcsched::presets::{preset, ScenarioPreset};
use mcsched::trainer::{evaluate_policy, train_with, DeMappoPolicy, EvalOptions, EvalResult, Resolver, SchedulingPolicy};
use mcsched::{Error, Result};

use manifest::{unix_now, OutputDir};

#[derive(Parser)]
#[command(name = "mcsched", version, about = "Multi-channel multicast scheduling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Scenario preset (S1 to S6).
    #[arg(long)]
    preset: String,
    /// Seed of the environment and policy streams (defaults to the preset's).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// JSON merge patch applied to the preset, inline or `@file`.
    #[arg(long)]
    config: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train DE-MAPPO; writes checkpoints, the metric trace and per-episode rewards.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Override the preset's episode count.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Latency/energy per algorithm for each V, plus the bound.
    Tradeoff {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated V values (defaults to the preset's list).
        #[arg(long, value_delimiter = ',')]
        v_list: Option<Vec<f64>>,
        /// Evaluation slots per policy (defaults to the preset's).
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run one baseline policy.
    Baseline {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        which: BaselineKind,
        /// Evaluation slots (defaults to the preset's).
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Latency-rate curves and the performance upper bound.
    Bound {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated V values (defaults to the preset's V).
        #[arg(long, value_delimiter = ',')]
        v_list: Option<Vec<f64>>,
        /// Monte Carlo slots per curve (default 1000000); ignored with --exact.
        #[arg(long)]
        horizon: Option<usize>,
        /// Evaluate threshold curves by dynamic programming instead of simulation.
        #[arg(long)]
        exact: bool,
    },
    /// Run the built-in self-checks.
    Verify,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BaselineKind {
    RoundRobin,
    Stopping,
    Rvi,
    Unconstrained,
}

const EVAL_HEADER: [&str; 6] = ["v", "algorithm", "avg_reward", "reward_stderr", "avg_latency", "avg_energy"];
const BOUND_MIN_RATE: f64 = 0.01;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { run, episodes } => cmd_train(&run, episodes),
        Command::Tradeoff { run, v_list, horizon, episodes } => cmd_tradeoff(&run, v_list, horizon, episodes),
        Command::Baseline { run, which, horizon } => cmd_baseline(&run, which, horizon),
        Command::Bound { run, v_list, horizon, exact } => cmd_bound(&run, v_list, horizon, exact),
        Command::Verify => cmd_verify(),
    }
}

fn load_preset(run: &RunArgs) -> Result<ScenarioPreset> {
    let mut p = preset(&run.preset)?;
    if let Some(text) = &run.config {
        let text = match text.strip_prefix('@') {
            Some(path) => std::fs::read_to_string(path)?,
            None => text.clone(),
        };
        p = p.apply_override(&serde_json::from_str(&text)?)?;
    }
    if let Some(seed) = run.seed {
        p = p.with_seed(seed);
    }
    Ok(p)
}

fn with_episodes(mut p: ScenarioPreset, episodes: Option<usize>) -> Result<ScenarioPreset> {
    if let Some(e) = episodes {
        p.train.episodes = e;
        p.train.validate()?;
    }
    Ok(p)
}

fn eval_options(p: &ScenarioPreset, horizon: Option<usize>) -> EvalOptions {
    EvalOptions::new(horizon.unwrap_or(p.eval_horizon), p.env().seed)
}

fn eval_row(v: f64, algorithm: &str, e: &EvalResult) -> Vec<String> {
    vec![
        v.to_string(),
        algorithm.to_string(),
        e.avg_reward.to_string(),
        e.reward_stderr.to_string(),
        e.avg_latency.to_string(),
        e.avg_energy.to_string(),
    ]
}

fn bound_row(v: f64, b: &BoundSolution) -> Vec<String> {
    vec![v.to_string(), "bound".into(), b.bound.to_string(), String::new(), b.latency.to_string(), b.energy.to_string()]
}

fn write_rows(file: File, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn save_agents(dir: &Path, agents: &[mcsched::ppo::PpoAgent]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (m, a) in agents.iter().enumerate() {
        a.save(dir, m)?;
    }
    Ok(())
}

fn cmd_train(run: &RunArgs, episodes: Option<usize>) -> Result<()> {
    let started = unix_now();
    let p = with_episodes(load_preset(run)?, episodes)?;
    let mut out = OutputDir::create(&run.out)?;
    let ckpt = out.root().join("checkpoints");
    let total = p.train.episodes;
    let output = train_with(&p.train, |episode, agents| {
        eprintln!("episode {}/{total}", episode + 1);
        save_agents(&ckpt, agents)
    })?;
    // Covers a zero-episode run, where the callback never fires.
    save_agents(&ckpt, &output.agents)?;
    for m in 0..output.agents.len() {
        out.record(&format!("checkpoints/agent_{m}_actor.json"));
        out.record(&format!("checkpoints/agent_{m}_critic.json"));
    }
    out.write_with("trace.csv", |f| output.trace.write_csv(f))?;
    let rows: Vec<Vec<String>> =
        output.episode_rewards.iter().enumerate().map(|(i, r)| vec![(i + 1).to_string(), r.to_string()]).collect();
    out.write_with("episodes.csv", |f| write_rows(f, &["episode", "avg_reward"], &rows))?;
    let manifest = out.finish("train", &p, started)?;
    println!(
        "trained {} for {total} episodes; last episode reward {:.4}; manifest {}",
        p.name,
        output.episode_rewards.last().copied().unwrap_or(f64::NAN),
        manifest.display()
    );
    Ok(())
}

fn is_stopping_family(cfg: &EnvConfig) -> bool {
    cfg.n_messages == 1 && cfg.n_channels == 1 && cfg.duration_table[0][0] == 1
}

fn is_rvi_family(cfg: &EnvConfig) -> bool {
    cfg.n_messages == 2 && cfg.n_channels == 1 && cfg.duration_table.iter().all(|r| r[0] == 1)
}

/// Threshold curves where penalties are constant, DQN curves otherwise.
fn scenario_curves(cfg: &EnvConfig, method: CurveMethod) -> Result<Vec<LatencyRateCurve>> {
    match threshold_curves(cfg, BOUND_MIN_RATE, method) {
        Err(Error::NotApplicable(_)) => {
            let grid: Vec<f64> = (1..=10).map(|i| f64::from(i) / 10.0).collect();
            cfg.arrival_rates
                .iter()
                .zip(&cfg.penalty_fn)
                .enumerate()
                .map(|(n, (&lambda, p))| {
                    let dqn = DqnConfig { buffer_len: cfg.buffer_len, seed: cfg.seed.wrapping_add(n as u64), ..DqnConfig::default() };
                    dqn_curve(lambda, p, &grid, &dqn)
                })
                .collect()
        }
        other => other,
    }
}

fn cmd_tradeoff(run: &RunArgs, v_list: Option<Vec<f64>>, horizon: Option<usize>, episodes: Option<usize>) -> Result<()> {
    let started = unix_now();
    let p = with_episodes(load_preset(run)?, episodes)?;
    let mut vs = v_list.unwrap_or_else(|| p.v_list.clone());
    if vs.is_empty() || vs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Config("v-list must hold finite non-negative values".into()));
    }
    vs.sort_by(f64::total_cmp);
    let seed = p.env().seed;
    let curves = scenario_curves(p.env(), CurveMethod::MonteCarlo { horizon: 1_000_000, seed })?;
    let mut out = OutputDir::create(&run.out)?;
    let mut rows = Vec::new();
    let mut bound_energy: Vec<(f64, f64)> = Vec::new();
    for &v in &vs {
        let pv = p.with_v(v);
        let cfg = pv.env();
        let opts = eval_options(&pv, horizon);
        eprintln!("V = {v}: training DE-MAPPO");
        let trained = train_with(&pv.train, |_, _| Ok(()))?;
        let mut de = DeMappoPolicy::new(&trained.agents, Resolver::DistributionEmbedding, seed);
        rows.push(eval_row(v, "de-mappo", &evaluate_policy(&mut de, cfg, &opts)?));
        rows.push(eval_row(v, "round-robin", &evaluate_policy(&mut RoundRobin::new(), cfg, &opts)?));
        if is_stopping_family(cfg) {
            let mut stop = solve_optimal_stopping(cfg, &StoppingOptions { seed, ..StoppingOptions::default() })?.policy;
            rows.push(eval_row(v, "optimal-stopping", &evaluate_policy(&mut stop, cfg, &opts)?));
        }
        if is_rvi_family(cfg) {
            let cap = pv.rvi_cap.unwrap_or(10);
            match rvi_solve(cfg, &RviOptions { cap, ..RviOptions::default() }) {
                Ok(mut rvi) => rows.push(eval_row(v, "rvi", &evaluate_policy(&mut rvi, cfg, &opts)?)),
                Err(e) => eprintln!("V = {v}: rvi skipped ({e})"),
            }
        }
        let b = scenario_bound(cfg, &curves)?;
        bound_energy.push((v, b.energy));
        rows.push(bound_row(v, &b));
    }
    if let Some(w) = bound_energy.windows(2).find(|w| w[1].1 > w[0].1 + 1e-9 * w[0].1.abs().max(1.0)) {
        return Err(Error::Solver(format!(
            "bound energy rose from {} at V={} to {} at V={}",
            w[0].1, w[0].0, w[1].1, w[1].0
        )));
    }
    let path = out.write_with("tradeoff.csv", |f| write_rows(f, &EVAL_HEADER, &rows))?;
    out.write_with("curves.csv", |f| write_curves_csv(&curves, f))?;
    out.finish("tradeoff", &p, started)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_baseline(run: &RunArgs, which: BaselineKind, horizon: Option<usize>) -> Result<()> {
    let started = unix_now();
    let p = load_preset(run)?;
    let cfg = p.env();
    let v = cfg.tradeoff_v;
    let opts = eval_options(&p, horizon);
    let mut out = OutputDir::create(&run.out)?;
    match which {
        BaselineKind::RoundRobin => {
            let e = evaluate_policy(&mut RoundRobin::new(), cfg, &opts)?;
            out.write_with("baseline_round_robin.csv", |f| write_rows(f, &EVAL_HEADER, &[eval_row(v, "round-robin", &e)]))?;
            println!("round-robin average reward {:.4} +- {:.4}", e.avg_reward, e.reward_stderr);
        }
        BaselineKind::Stopping => {
            let sol = solve_optimal_stopping(cfg, &StoppingOptions { seed: cfg.seed, ..StoppingOptions::default() })?;
            let mut policy = sol.policy;
            let e = evaluate_policy(&mut policy, cfg, &opts)?;
            let summary = vec![vec![
                policy.threshold.to_string(),
                sol.value.to_string(),
                e.avg_reward.to_string(),
                e.reward_stderr.to_string(),
            ]];
            out.write_with("stopping.csv", |f| {
                write_rows(f, &["threshold", "value", "simulated_reward", "simulated_stderr"], &summary)
            })?;
            let sweep: Vec<Vec<String>> = sol.sweep.iter().map(|(h, r)| vec![h.to_string(), r.to_string()]).collect();
            out.write_with("stopping_sweep.csv", |f| write_rows(f, &["threshold", "avg_reward"], &sweep))?;
            println!("optimal threshold {} value {:.4}", policy.threshold, sol.value);
        }
        BaselineKind::Rvi => {
            let cap = p.rvi_cap.unwrap_or(10);
            let mut policy = rvi_solve(cfg, &RviOptions { cap, ..RviOptions::default() })?;
            let (gain, iterations, states) = (policy.gain, policy.iterations, policy.n_states());
            out.write_with("rvi_policy.csv", |f| policy.write_csv(f))?;
            let curve = extract_switch_curve(&policy);
            out.write_with("switch_curve.csv", |f| write_switch_curve_csv(&curve, f))?;
            let e = evaluate_policy(&mut policy, cfg, &opts)?;
            let summary = vec![vec![
                cap.to_string(),
                states.to_string(),
                iterations.to_string(),
                gain.to_string(),
                e.avg_reward.to_string(),
                e.reward_stderr.to_string(),
            ]];
            out.write_with("rvi.csv", |f| {
                write_rows(f, &["cap", "states", "iterations", "gain", "simulated_reward", "simulated_stderr"], &summary)
            })?;
            println!("rvi over {states} states: gain {gain:.4} after {iterations} iterations");
        }
        BaselineKind::Unconstrained => {
            let mut train_cfg = p.train.clone();
            train_cfg.resolver = Resolver::Unconstrained;
            let trained = train_with(&train_cfg, |_, _| Ok(()))?;
            let mut policy = DeMappoPolicy::new(&trained.agents, Resolver::Unconstrained, cfg.seed);
            let e = evaluate_policy(&mut policy, cfg, &opts)?;
            debug_assert!(policy.relaxed());
            out.write_with("baseline_unconstrained.csv", |f| {
                write_rows(f, &EVAL_HEADER, &[eval_row(v, "unconstrained-mappo", &e)])
            })?;
            println!("unconstrained MAPPO average reward {:.4} +- {:.4}", e.avg_reward, e.reward_stderr);
        }
    }
    out.finish("baseline", &p, started)?;
    Ok(())
}

fn cmd_bound(run: &RunArgs, v_list: Option<Vec<f64>>, horizon: Option<usize>, exact: bool) -> Result<()> {
    let started = unix_now();
    let p = load_preset(run)?;
    let vs = v_list.unwrap_or_else(|| vec![p.env().tradeoff_v]);
    let method = if exact {
        CurveMethod::Exact
    } else {
        CurveMethod::MonteCarlo { horizon: horizon.unwrap_or(1_000_000), seed: p.env().seed }
    };
    let curves = scenario_curves(p.env(), method)?;
    let mut out = OutputDir::create(&run.out)?;
    let mut sweep = Vec::new();
    let mut rates = Vec::new();
    for &v in &vs {
        let b = scenario_bound(p.with_v(v).env(), &curves)?;
        for (n, row) in b.rates.rates.iter().enumerate() {
            for (m, r) in row.iter().enumerate() {
                rates.push(vec![v.to_string(), (n + 1).to_string(), (m + 1).to_string(), r.to_string()]);
            }
        }
        sweep.push(SweepRow { v, bound: b.bound, energy: b.energy, latency: b.latency });
    }
    out.write_with("bound_sweep.csv", |f| write_sweep_csv(&sweep, f))?;
    out.write_with("bound_rates.csv", |f| write_rows(f, &["v", "message", "channel", "rate"], &rates))?;
    out.write_with("curves.csv", |f| write_curves_csv(&curves, f))?;
    out.finish("bound", &p, started)?;
    let mut stdout = std::io::stdout().lock();
    for row in &sweep {
        writeln!(stdout, "V = {}: bound {:.6} (energy {:.6}, latency {:.6})", row.v, row.bound, row.energy, row.latency)?;
    }
    Ok(())
}

fn cmd_verify() -> Result<()> {
    let results = mcsched::verify::run_all();
    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.name).collect();
    for r in &results {
        println!("{} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("self-checks failed: {}", failed.join(", "))))
    }
}
