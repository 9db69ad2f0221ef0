//! Classical comparison policies: round robin, the optimal stopping
//! threshold for one message on one channel, and relative value iteration
//! for two messages on one channel.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bound::{poisson_table, CycleStats};
use crate::env::{EnvConfig, EnvState, GainSampler, JointAction};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::trainer::SchedulingPolicy;

pub use crate::de::unconstrained_sample;

/// Free channels take the next messages in cyclic order; a message is never
/// given to two channels in one slot.
#[derive(Debug, Clone, Default)]
pub struct RoundRobin {
    cursor: usize,
}

impl RoundRobin {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn next_action(&mut self, cfg: &EnvConfig, state: &EnvState) -> JointAction {
        let n = cfg.n_messages;
        let mut used = vec![false; n];
        let choices = state
            .channel_avail
            .iter()
            .map(|&c| {
                if c > 0 {
                    return 0;
                }
                for _ in 0..n {
                    let msg = self.cursor;
                    self.cursor = (self.cursor + 1) % n;
                    if !used[msg] {
                        used[msg] = true;
                        return msg + 1;
                    }
                }
                0
            })
            .collect();
        JointAction::new(choices)
    }
}

impl SchedulingPolicy for RoundRobin {
    fn act(&mut self, cfg: &EnvConfig, state: &EnvState) -> Result<JointAction> {
        Ok(self.next_action(cfg, state))
    }
}

fn constant_penalty(cfg: &EnvConfig, n: usize) -> Result<f64> {
    let p = &cfg.penalty_fn[n];
    if p.iter().any(|&x| (x - p[0]).abs() > 1e-12) {
        return Err(Error::NotApplicable(format!("message {} has an age-dependent penalty", n + 1)));
    }
    Ok(p[0])
}

fn require_shape(cfg: &EnvConfig, n: usize, what: &str) -> Result<()> {
    cfg.validate()?;
    if cfg.n_messages != n || cfg.n_channels != 1 || cfg.duration_table.iter().flatten().any(|&t| t != 1) {
        return Err(Error::NotApplicable(format!(
            "{what} needs {n} message(s), one channel and unit durations; scenario has N={}, M={}",
            cfg.n_messages, cfg.n_channels
        )));
    }
    Ok(())
}

/// Multicast when more than `threshold` requests are buffered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub threshold: u64,
}

impl SchedulingPolicy for ThresholdPolicy {
    fn act(&mut self, cfg: &EnvConfig, state: &EnvState) -> Result<JointAction> {
        require_shape(cfg, 1, "the threshold policy")?;
        let total: u64 = state.request_matrix[0].iter().sum();
        let go = state.channel_avail[0] == 0 && total > self.threshold;
        Ok(JointAction::new(vec![usize::from(go)]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingOptions {
    /// Largest threshold swept.
    pub q_max: u64,
    /// Slots simulated (shared by all thresholds).
    pub horizon: usize,
    pub seed: u64,
    /// Relative slack allowed when checking unimodality of the sweep.
    pub unimodal_tol: f64,
}

impl Default for StoppingOptions {
    fn default() -> Self {
        Self { q_max: 60, horizon: 1_000_000, seed: 0, unimodal_tol: 2e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingSolution {
    pub policy: ThresholdPolicy,
    /// Long-run average reward of the best threshold.
    pub value: f64,
    /// `(threshold, average reward)` for every swept threshold.
    pub sweep: Vec<(u64, f64)>,
}

/// One slot of exogenous randomness for the single-message chain.
#[derive(Debug, Clone, Copy)]
struct ChainDraw {
    arrivals: u64,
    worst_gain: Option<f64>,
}

/// Renewal-reward value of a threshold on the single-message chain with
/// worst-gain tracking, on a fixed draw sequence.
fn stopping_cycle_mc(draws: &[ChainDraw], threshold: u64, penalty: f64, energy_per_gain: f64, max_gain: f64) -> CycleStats {
    let Some(first) = draws.first() else {
        return CycleStats { mean_len: f64::INFINITY, mean_cost: 0.0 };
    };
    let mut x = first.arrivals;
    let mut g = first.worst_gain.unwrap_or(max_gain);
    let (mut acc_cost, mut acc_len) = (0.0, 0u64);
    let (mut total_cost, mut total_len, mut cycles) = (0.0, 0u64, 0u64);
    for d in &draws[1..] {
        acc_cost += penalty * x as f64;
        acc_len += 1;
        if x > threshold {
            acc_cost += energy_per_gain / g;
            total_cost += acc_cost;
            total_len += acc_len;
            cycles += 1;
            acc_cost = 0.0;
            acc_len = 0;
            x = d.arrivals;
            g = d.worst_gain.unwrap_or(max_gain);
        } else {
            x += d.arrivals;
            if let Some(w) = d.worst_gain {
                g = g.min(w);
            }
        }
    }
    if cycles == 0 {
        return CycleStats { mean_len: f64::INFINITY, mean_cost: 0.0 };
    }
    CycleStats { mean_len: total_len as f64 / cycles as f64, mean_cost: total_cost / cycles as f64 }
}

/// Best threshold for one message on one unit-duration channel, by a sweep
/// over `0..=q_max` evaluated with renewal-reward simulation on common
/// random numbers.
pub fn solve_optimal_stopping(cfg: &EnvConfig, opts: &StoppingOptions) -> Result<StoppingSolution> {
    require_shape(cfg, 1, "optimal stopping")?;
    let penalty = constant_penalty(cfg, 0)?;
    let lambda = cfg.arrival_rates[0];
    let sampler = GainSampler::new(&cfg.gain_support);
    let mut arrivals_rng = rng::stream(opts.seed, Stream::Arrivals);
    let mut gains_rng = rng::stream(opts.seed, Stream::Gains);
    let draws: Vec<ChainDraw> = (0..opts.horizon)
        .map(|_| {
            let arrivals = rng::poisson(&mut arrivals_rng, lambda);
            ChainDraw { arrivals, worst_gain: sampler.sample_min(&mut gains_rng, arrivals) }
        })
        .collect();
    let energy_per_gain = cfg.tradeoff_v * cfg.energy_const[0][0] * f64::from(cfg.duration_table[0][0]);
    let max_gain = cfg.max_gain();
    let sweep: Vec<(u64, f64)> = (0..=opts.q_max)
        .map(|h| (h, -stopping_cycle_mc(&draws, h, penalty, energy_per_gain, max_gain).cost_rate()))
        .collect();
    best_of_sweep(sweep, opts)
}

fn best_of_sweep(sweep: Vec<(u64, f64)>, opts: &StoppingOptions) -> Result<StoppingSolution> {
    let (best_h, best_v) = sweep
        .iter()
        .copied()
        .fold((0, f64::NEG_INFINITY), |acc, (h, v)| if v > acc.1 { (h, v) } else { acc });
    if best_h == opts.q_max && opts.q_max > 0 {
        return Err(Error::NonInterior { threshold: best_h });
    }
    let values: Vec<f64> = sweep.iter().map(|&(_, v)| v).collect();
    if !is_unimodal(&values, opts.unimodal_tol) {
        return Err(Error::Config("threshold sweep is not unimodal; increase the horizon".into()));
    }
    Ok(StoppingSolution { policy: ThresholdPolicy { threshold: best_h }, value: best_v, sweep })
}

/// Rises to its maximum and falls after it, up to a relative slack.
pub fn is_unimodal(values: &[f64], tol: f64) -> bool {
    let Some(peak) = values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i) else {
        return true;
    };
    let slack = |a: f64, b: f64| tol * a.abs().max(b.abs());
    values[..=peak].windows(2).all(|w| w[1] >= w[0] - slack(w[0], w[1]))
        && values[peak..].windows(2).all(|w| w[1] <= w[0] + slack(w[0], w[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RviOptions {
    pub cap: usize,
    pub max_iterations: usize,
    /// Stop when the span of successive value differences falls below this.
    pub tolerance: f64,
}

impl Default for RviOptions {
    fn default() -> Self {
        Self { cap: 15, max_iterations: 100_000, tolerance: 1e-9 }
    }
}

/// Greedy policy over capped request counts of two messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub cap: usize,
    /// Action (0 idle, 1, 2) at index `q1 * (cap + 1) + q2`.
    pub table: Vec<u8>,
    /// Optimal long-run average reward of the capped chain.
    pub gain: f64,
    /// Relative values, normalised to zero at the empty state.
    pub relative_values: Vec<f64>,
    pub iterations: usize,
}

impl TabularPolicy {
    pub fn n_states(&self) -> usize {
        self.table.len()
    }

    pub fn action(&self, q1: usize, q2: usize) -> u8 {
        self.table[q1 * (self.cap + 1) + q2]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["q1", "q2", "action", "relative_value"])?;
        for q1 in 0..=self.cap {
            for q2 in 0..=self.cap {
                let i = q1 * (self.cap + 1) + q2;
                w.write_record([q1.to_string(), q2.to_string(), self.table[i].to_string(), self.relative_values[i].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

impl SchedulingPolicy for TabularPolicy {
    fn act(&mut self, cfg: &EnvConfig, state: &EnvState) -> Result<JointAction> {
        require_shape(cfg, 2, "the tabular policy")?;
        let totals = state.request_totals();
        let q1 = (totals[0] as usize).min(self.cap);
        let q2 = (totals[1] as usize).min(self.cap);
        let a = if state.channel_avail[0] > 0 { 0 } else { self.action(q1, q2) };
        Ok(JointAction::new(vec![usize::from(a)]))
    }
}

/// The capped two-message chain: rewards and transition kernels.
#[derive(Debug, Clone)]
pub struct CappedChain {
    pub cap: usize,
    /// `reward[a][s]` for action `a` in state `s = q1 * (cap + 1) + q2`.
    pub reward: [Vec<f64>; 3],
    /// `kernel[n][b][j]`: probability that message `n` goes from base count
    /// `b` (after any service) to `j`, with the overflow folded into `cap`.
    pub kernel: [Vec<Vec<f64>>; 2],
}

impl CappedChain {
    pub fn new(cfg: &EnvConfig, cap: usize) -> Result<Self> {
        require_shape(cfg, 2, "relative value iteration")?;
        if cap == 0 {
            return Err(Error::Config("cap must be positive".into()));
        }
        let penalties = [constant_penalty(cfg, 0)?, constant_penalty(cfg, 1)?];
        let sampler = GainSampler::new(&cfg.gain_support);
        let size = cap + 1;
        let mut reward = [vec![0.0; size * size], vec![0.0; size * size], vec![0.0; size * size]];
        for q1 in 0..size {
            for q2 in 0..size {
                let s = q1 * size + q2;
                let latency = penalties[0] * q1 as f64 + penalties[1] * q2 as f64;
                reward[0][s] = -latency;
                for (n, q) in [(0usize, q1), (1, q2)] {
                    let energy = f64::from(cfg.duration_table[n][0]) * cfg.energy_const[n][0] * sampler.expected_inverse_min(q as u64);
                    reward[n + 1][s] = -latency - cfg.tradeoff_v * energy;
                }
            }
        }
        let kernel = [capped_kernel(cfg.arrival_rates[0], cap), capped_kernel(cfg.arrival_rates[1], cap)];
        Ok(Self { cap, reward, kernel })
    }

    pub fn n_states(&self) -> usize {
        (self.cap + 1) * (self.cap + 1)
    }

    /// Expected `h` after the arrivals from every base pair `(b1, b2)`.
    fn expect(&self, h: &[f64]) -> Vec<f64> {
        let size = self.cap + 1;
        let mut partial = vec![0.0; size * size];
        for b1 in 0..size {
            for j1 in 0..size {
                let p = self.kernel[0][b1][j1];
                if p == 0.0 {
                    continue;
                }
                for j2 in 0..size {
                    partial[b1 * size + j2] += p * h[j1 * size + j2];
                }
            }
        }
        let mut out = vec![0.0; size * size];
        for b1 in 0..size {
            for b2 in 0..size {
                out[b1 * size + b2] = self.kernel[1][b2].iter().enumerate().map(|(j2, &p)| p * partial[b1 * size + j2]).sum();
            }
        }
        out
    }

    /// State index reached before arrivals when action `a` is taken in `s`.
    pub fn base(&self, s: usize, a: usize) -> usize {
        let size = self.cap + 1;
        let (q1, q2) = (s / size, s % size);
        match a {
            1 => q2,
            2 => q1 * size,
            _ => s,
        }
    }

    /// Action values `Q(s, a)` for a relative value vector.
    pub fn q_values(&self, h: &[f64]) -> [Vec<f64>; 3] {
        let ev = self.expect(h);
        let n = self.n_states();
        let mut q = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for (a, qa) in q.iter_mut().enumerate() {
            for (s, v) in qa.iter_mut().enumerate() {
                *v = self.reward[a][s] + ev[self.base(s, a)];
            }
        }
        q
    }

    /// Transition row of state `s` under action `a`.
    pub fn transition_row(&self, s: usize, a: usize) -> Vec<f64> {
        let size = self.cap + 1;
        let b = self.base(s, a);
        let (b1, b2) = (b / size, b % size);
        let mut row = vec![0.0; size * size];
        for j1 in 0..size {
            for j2 in 0..size {
                row[j1 * size + j2] = self.kernel[0][b1][j1] * self.kernel[1][b2][j2];
            }
        }
        row
    }
}

fn capped_kernel(lambda: f64, cap: usize) -> Vec<Vec<f64>> {
    let pmf = poisson_table(lambda);
    (0..=cap)
        .map(|b| {
            let mut row = vec![0.0; cap + 1];
            let mut below = 0.0;
            for (j, slot) in row.iter_mut().enumerate().take(cap).skip(b) {
                *slot = pmf.get(j - b).copied().unwrap_or(0.0);
                below += *slot;
            }
            row[cap] = (1.0 - below).max(0.0);
            row
        })
        .collect()
}

const TIE_TOLERANCE: f64 = 1e-9;

/// Lowest action whose value is within tolerance of the best.
fn greedy(q: &[Vec<f64>; 3], s: usize) -> (u8, f64) {
    let best = q.iter().map(|qa| qa[s]).fold(f64::NEG_INFINITY, f64::max);
    let tol = TIE_TOLERANCE * best.abs().max(1.0);
    let a = (0..3).find(|&a| q[a][s] >= best - tol).unwrap_or(0);
    (a as u8, best)
}

/// Relative value iteration on the capped two-message chain, reference
/// state `(0, 0)`.
pub fn rvi_solve(cfg: &EnvConfig, opts: &RviOptions) -> Result<TabularPolicy> {
    let chain = CappedChain::new(cfg, opts.cap)?;
    let n = chain.n_states();
    let mut h = vec![0.0; n];
    let mut span = f64::INFINITY;
    for it in 1..=opts.max_iterations {
        let q = chain.q_values(&h);
        let th: Vec<f64> = (0..n).map(|s| greedy(&q, s).1).collect();
        let diff: Vec<f64> = th.iter().zip(&h).map(|(a, b)| a - b).collect();
        let hi = diff.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = diff.iter().copied().fold(f64::INFINITY, f64::min);
        span = hi - lo;
        let gain = th[0];
        h = th.iter().map(|v| v - gain).collect();
        if span < opts.tolerance {
            let q = chain.q_values(&h);
            let table: Vec<u8> = (0..n).map(|s| greedy(&q, s).0).collect();
            // Past the cap latency stops growing, so idling there means the
            // truncation, not the model, decided the policy.
            if table[n - 1] == 0 {
                return Err(Error::Config(format!(
                    "cap {} too small: the policy idles with both buffers full",
                    opts.cap
                )));
            }
            return Ok(TabularPolicy { cap: opts.cap, table, gain, relative_values: h, iterations: it });
        }
    }
    Err(Error::NonConvergence { iterations: opts.max_iterations, span })
}

/// For each `q1`, the smallest `q2` at which the policy multicasts message 2.
pub fn extract_switch_curve(policy: &TabularPolicy) -> Vec<(usize, Option<usize>)> {
    (0..=policy.cap).map(|q1| (q1, (0..=policy.cap).find(|&q2| policy.action(q1, q2) == 2))).collect()
}

/// The boundary never moves down as `q1` grows (no switch counts as infinite).
pub fn switch_curve_is_monotone(curve: &[(usize, Option<usize>)]) -> bool {
    curve.windows(2).all(|w| match (w[0].1, w[1].1) {
        (Some(a), Some(b)) => b >= a,
        (None, Some(_)) => false,
        _ => true,
    })
}

pub fn write_switch_curve_csv<W: Write>(curve: &[(usize, Option<usize>)], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["q1", "q2_switch"])?;
    for &(q1, q2) in curve {
        if let Some(q2) = q2 {
            w.write_record([q1.to_string(), q2.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bound::threshold_cycle_exact;
    use crate::env::tests::config;
    use crate::trainer::{evaluate_policy, EvalOptions};

    fn one_one(v: f64) -> EnvConfig {
        EnvConfig { tradeoff_v: v, ..config(1, 1) }
    }

    fn two_one(l1: f64, l2: f64, v: f64) -> EnvConfig {
        EnvConfig { arrival_rates: vec![l1, l2], tradeoff_v: v, ..config(2, 1) }
    }


    #[test]
    fn rvi_rejects_a_cap_that_makes_idling_optimal() {
        let mut cfg = config(2, 1);
        cfg.arrival_rates = vec![2.0, 3.0];
        cfg.tradeoff_v = 5.0;
        let err = rvi_solve(&cfg, &RviOptions { cap: 10, ..RviOptions::default() }).unwrap_err();
        assert_eq!(err.kind(), "config");
    }
    #[test]
    fn round_robin_alternates() {
        let cfg = two_one(2.0, 3.0, 0.0);
        let mut rr = RoundRobin::new();
        let s = cfg.init_state();
        let seq: Vec<usize> = (0..6).map(|_| rr.next_action(&cfg, &s).choices[0]).collect();
        assert_eq!(seq, vec![1, 2, 1, 2, 1, 2]);
    }

    #[test]
    fn round_robin_idles_busy_channels() {
        let cfg = config(3, 2);
        let mut s = cfg.init_state();
        s.channel_avail = vec![2, 1];
        assert_eq!(RoundRobin::new().next_action(&cfg, &s).choices, vec![0, 0]);
        s.channel_avail = vec![0, 0];
        let mut rr = RoundRobin::new();
        assert_eq!(rr.next_action(&cfg, &s).choices, vec![1, 2]);
        assert_eq!(rr.next_action(&cfg, &s).choices, vec![3, 1]);
    }

    #[test]
    fn round_robin_never_duplicates_with_more_channels_than_messages() {
        let cfg = config(2, 3);
        let s = cfg.init_state();
        let mut rr = RoundRobin::new();
        for _ in 0..10 {
            let a = rr.next_action(&cfg, &s);
            assert!(cfg.check_action(&s, &a).is_ok(), "{a:?}");
        }
    }

    #[test]
    fn round_robin_single_message_latency_is_lambda() {
        let cfg = one_one(1.0);
        let r = evaluate_policy(&mut RoundRobin::new(), &cfg, &EvalOptions::new(100_000, 3)).unwrap();
        assert!((r.avg_latency - 2.0).abs() < 0.05 * 2.0);
        assert!((r.rates[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stopping_without_energy_serves_every_nonempty_slot() {
        let sol = solve_optimal_stopping(&one_one(0.0), &StoppingOptions { horizon: 200_000, ..StoppingOptions::default() }).unwrap();
        assert_eq!(sol.policy.threshold, 0);
        assert!((sol.value + 2.0).abs() < 0.02);
    }

    #[test]
    fn stopping_sweep_matches_exact_cycles() {
        let cfg = one_one(1.0);
        let sampler = GainSampler::new(&cfg.gain_support);
        let sol = solve_optimal_stopping(&cfg, &StoppingOptions::default()).unwrap();
        for &(h, v) in sol.sweep.iter().take(8) {
            let exact = threshold_cycle_exact(2.0, h as i64, 1.0, &|x| 500.0 * sampler.expected_inverse_min(x));
            assert!((v + exact.cost_rate()).abs() < 0.01 * v.abs(), "h={h}: {v} vs {}", -exact.cost_rate());
        }
    }

    #[test]
    fn stopping_value_agrees_with_environment_run() {
        let cfg = one_one(1.0);
        let sol = solve_optimal_stopping(&cfg, &StoppingOptions::default()).unwrap();
        let mut policy = sol.policy;
        let r = evaluate_policy(&mut policy, &cfg, &EvalOptions::new(200_000, 11)).unwrap();
        assert!((r.avg_reward - sol.value).abs() < 3.0 * r.reward_stderr + 0.01 * sol.value.abs(), "{r:?} vs {}", sol.value);
    }

    #[test]
    fn narrow_sweep_reports_edge_optimum() {
        let err = solve_optimal_stopping(&one_one(50.0), &StoppingOptions { q_max: 2, horizon: 50_000, ..StoppingOptions::default() }).unwrap_err();
        assert!(matches!(err, Error::NonInterior { threshold: 2 }));
    }

    #[test]
    fn stopping_needs_single_message() {
        assert_eq!(solve_optimal_stopping(&config(2, 1), &StoppingOptions::default()).unwrap_err().kind(), "not_applicable");
    }

    #[test]
    fn unimodality_check() {
        assert!(is_unimodal(&[-5.0, -3.0, -2.0, -2.5, -4.0], 0.0));
        assert!(!is_unimodal(&[-5.0, -3.0, -4.0, -2.0, -4.0], 0.0));
    }

    #[test]
    fn capped_kernel_rows_are_stochastic() {
        for lambda in [0.5, 2.0, 7.0] {
            for row in capped_kernel(lambda, 6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rvi_symmetric_instance_has_symmetric_policy() {
        let p = rvi_solve(&two_one(2.0, 2.0, 0.0), &RviOptions { cap: 8, ..RviOptions::default() }).unwrap();
        for q1 in 0..=8 {
            for q2 in 0..=8 {
                if q1 == q2 {
                    continue;
                }
                let a = p.action(q1, q2);
                let b = p.action(q2, q1);
                let mirrored = match a {
                    1 => 2,
                    2 => 1,
                    x => x,
                };
                assert_eq!(mirrored, b, "({q1},{q2}) -> {a}, ({q2},{q1}) -> {b}");
            }
        }
        let curve = extract_switch_curve(&p);
        assert!(switch_curve_is_monotone(&curve));
    }

    #[test]
    fn rvi_greedy_policy_is_a_fixed_point() {
        let cfg = two_one(2.0, 3.0, 0.0);
        let p = rvi_solve(&cfg, &RviOptions { cap: 10, ..RviOptions::default() }).unwrap();
        let chain = CappedChain::new(&cfg, 10).unwrap();
        let q = chain.q_values(&p.relative_values);
        for s in 0..chain.n_states() {
            assert_eq!(greedy(&q, s).0, p.table[s]);
        }
        let again = chain.q_values(&(0..chain.n_states()).map(|s| greedy(&q, s).1 - greedy(&q, 0).1).collect::<Vec<_>>());
        for s in 0..chain.n_states() {
            assert_eq!(greedy(&again, s).0, p.table[s]);
        }
    }

    #[test]
    fn rvi_cap_fifteen_has_256_states() {
        let p = rvi_solve(&two_one(2.0, 7.0, 0.0), &RviOptions::default()).unwrap();
        assert_eq!(p.n_states(), 256);
    }

    #[test]
    fn heavier_second_message_moves_the_boundary_up() {
        // A fast-refilling buffer gains less from being served, so the
        // policy waits for a larger count of message 2 before switching.
        let base = rvi_solve(&two_one(2.0, 3.0, 0.0), &RviOptions { cap: 15, ..RviOptions::default() }).unwrap();
        let heavy = rvi_solve(&two_one(2.0, 7.0, 0.0), &RviOptions { cap: 15, ..RviOptions::default() }).unwrap();
        let b = extract_switch_curve(&base);
        let h = extract_switch_curve(&heavy);
        let mut lower = 0;
        for (x, y) in b.iter().zip(&h) {
            if let (Some(bv), Some(hv)) = (x.1, y.1) {
                assert!(hv >= bv);
                lower += usize::from(hv > bv);
            }
        }
        assert!(lower > 0);
    }

    #[test]
    fn idle_everywhere_gives_empty_curve() {
        let p = TabularPolicy { cap: 3, table: vec![0; 16], gain: 0.0, relative_values: vec![0.0; 16], iterations: 0 };
        assert!(extract_switch_curve(&p).iter().all(|(_, s)| s.is_none()));
    }

    #[test]
    fn rvi_gain_matches_simulation() {
        let cfg = two_one(2.0, 3.0, 0.0);
        let mut p = rvi_solve(&cfg, &RviOptions { cap: 15, ..RviOptions::default() }).unwrap();
        let r = evaluate_policy(&mut p, &cfg, &EvalOptions::new(200_000, 4)).unwrap();
        assert!((r.avg_reward - p.gain).abs() < 3.0 * r.reward_stderr + 0.01 * p.gain.abs(), "{} vs {}", r.avg_reward, p.gain);
    }

    #[test]
    fn rvi_with_energy_converges() {
        let p = rvi_solve(&two_one(2.0, 3.0, 1.0), &RviOptions { cap: 10, ..RviOptions::default() }).unwrap();
        assert!(p.gain < 0.0);
        assert_eq!(p.action(0, 0), 0);
    }

    #[test]
    fn unconstrained_product_law() {
        use crate::de::CategoricalPolicy;
        let ps = vec![CategoricalPolicy::new(vec![0.2, 0.8]).unwrap(), CategoricalPolicy::new(vec![0.3, 0.7]).unwrap()];
        let mut r = rng::stream(1, Stream::DeSample);
        let draws = 100_000;
        let dup = (0..draws).filter(|_| unconstrained_sample(&ps, &mut r).joint.choices == vec![1, 1]).count();
        assert!((dup as f64 / draws as f64 - 0.56).abs() < 0.01);
    }

    #[test]
    fn csv_exports() {
        let p = rvi_solve(&two_one(2.0, 3.0, 0.0), &RviOptions { cap: 4, ..RviOptions::default() }).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 26);
        let mut buf = Vec::new();
        write_switch_curve_csv(&extract_switch_curve(&p), &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("q1,q2_switch\n"));
    }
}
