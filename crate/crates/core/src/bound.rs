//! Performance upper bound.
//!
//! Three ingredients: the channel capacity check on multicast schedules, the
//! per-message latency-rate function `f(r)` (best negative latency penalty
//! per slot when the message is multicast `r` times per slot on average) and
//! the rate allocation that trades `f` against the minimum multicast energy
//! under the channel capacity constraint.

use std::io::Write;

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{shift_request_vector, EnvConfig, JointAction};
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, GradientSet, OutputHead};
use crate::rng::{self, poisson_pmf, Stream};

// ---------------------------------------------------------------------------
// Capacity

/// Per-channel accounting of busy slots along one trajectory.
///
/// A start of duration `d` at slot `s` contributes `min(d, t - s + 1)` busy
/// slots to the prefix ending at slot `t`; the load of every prefix must not
/// exceed its length.
#[derive(Debug, Clone)]
pub struct CapacityTracker {
    slot: u64,
    /// Busy slots committed by starts so far, including the unfinished tails.
    committed: Vec<u64>,
    residual: Vec<u32>,
    starts: Vec<u64>,
}

impl CapacityTracker {
    pub fn new(n_channels: usize) -> Self {
        Self { slot: 0, committed: vec![0; n_channels], residual: vec![0; n_channels], starts: vec![0; n_channels] }
    }

    /// Records one slot: `action` taken, `avail_after` the busy times after
    /// the transition.
    pub fn record(&mut self, cfg: &EnvConfig, action: &JointAction, avail_after: &[u32]) -> Result<()> {
        self.slot += 1;
        for (m, &a) in action.choices.iter().enumerate() {
            if a > 0 {
                self.committed[m] += u64::from(cfg.duration_table[a - 1][m]);
                self.starts[m] += 1;
            }
            self.residual[m] = avail_after[m];
            let load = self.committed[m] - u64::from(self.residual[m]);
            if load > self.slot {
                return Err(Error::CapacityExceeded { channel: m, slot: self.slot, load });
            }
        }
        Ok(())
    }

    /// Drops unfinished transmission tails, as when the environment is reset.
    pub fn reset_residual(&mut self) {
        for (c, r) in self.committed.iter_mut().zip(self.residual.iter_mut()) {
            *c -= u64::from(*r);
            *r = 0;
        }
    }

    pub fn slots(&self) -> u64 {
        self.slot
    }

    /// Completed busy slots per slot elapsed, per channel.
    pub fn loads(&self) -> Vec<f64> {
        self.committed
            .iter()
            .zip(&self.residual)
            .map(|(&c, &r)| (c - u64::from(r)) as f64 / self.slot.max(1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapacityReport {
    pub feasible: bool,
    /// `sum_n starts(n, m) * T(n, m) / slots` over the whole trace.
    pub loads: Vec<f64>,
    /// First `(slot, channel)` (1-based slot) whose prefix load exceeds the slot count.
    pub first_violation: Option<(u64, usize)>,
}

/// Checks the capacity condition on every prefix of a trajectory of joint
/// actions.
pub fn check_capacity(actions: &[JointAction], duration_table: &[Vec<u32>]) -> CapacityReport {
    let n_channels = actions.first().map_or(0, |a| a.choices.len());
    let mut active: Vec<Vec<u32>> = vec![Vec::new(); n_channels];
    let mut busy = vec![0u64; n_channels];
    let mut total = vec![0u64; n_channels];
    let mut first_violation = None;
    for (t, action) in actions.iter().enumerate() {
        let t = t as u64 + 1;
        for (m, &a) in action.choices.iter().enumerate() {
            if a > 0 {
                let d = duration_table[a - 1][m];
                active[m].push(d);
                total[m] += u64::from(d);
            }
            busy[m] += active[m].len() as u64;
            active[m].iter_mut().for_each(|d| *d -= 1);
            active[m].retain(|&d| d > 0);
            if busy[m] > t && first_violation.is_none() {
                first_violation = Some((t, m));
            }
        }
    }
    let slots = actions.len().max(1) as f64;
    CapacityReport {
        feasible: first_violation.is_none(),
        loads: total.iter().map(|&b| b as f64 / slots).collect(),
        first_violation,
    }
}

// ---------------------------------------------------------------------------
// Minimum energy

/// `e[n][m] = T[n][m] * Z[n][m] / L`: the cheapest possible multicast.
pub fn min_energy_table(duration_table: &[Vec<u32>], energy_const: &[Vec<f64>], max_gain: f64) -> Vec<Vec<f64>> {
    duration_table
        .iter()
        .zip(energy_const)
        .map(|(t_row, z_row)| t_row.iter().zip(z_row).map(|(&t, &z)| f64::from(t) * z / max_gain).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// Threshold renewal cycles

/// Mean length and mean cost of one renewal cycle between multicasts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleStats {
    pub mean_len: f64,
    pub mean_cost: f64,
}

impl CycleStats {
    pub fn rate(&self) -> f64 {
        1.0 / self.mean_len
    }

    /// Long-run cost per slot.
    pub fn cost_rate(&self) -> f64 {
        self.mean_cost / self.mean_len
    }
}

/// Poisson pmf up to the point where the remaining tail is negligible.
pub(crate) fn poisson_table(lambda: f64) -> Vec<f64> {
    let mut pmf = Vec::new();
    let mut cdf = 0.0;
    let mut k = 0u64;
    loop {
        let p = poisson_pmf(lambda, k);
        pmf.push(p);
        cdf += p;
        if k as f64 > lambda && (1.0 - cdf < 1e-16 || p < 1e-20) {
            break;
        }
        k += 1;
    }
    pmf
}

/// Exact renewal statistics of the policy "multicast when more than `h`
/// requests are buffered" for Poisson(`lambda`) arrivals.
///
/// Each slot costs `per_request` times the buffered count; the multicast
/// slot additionally costs `terminal(count)`. A cycle begins with the
/// arrivals of the multicast slot. `h = -1` multicasts every slot.
pub fn threshold_cycle_exact(lambda: f64, h: i64, per_request: f64, terminal: &dyn Fn(u64) -> f64) -> CycleStats {
    if lambda <= 0.0 {
        // No arrivals: the buffer stays empty; only h = -1 ever multicasts.
        return if h < 0 {
            CycleStats { mean_len: 1.0, mean_cost: terminal(0) }
        } else {
            CycleStats { mean_len: f64::INFINITY, mean_cost: 0.0 }
        };
    }
    let pmf = poisson_table(lambda);
    let h_len = (h + 1).max(0) as usize;
    // Values for buffered counts 0..=h (continuation region).
    let mut w = vec![0.0; h_len];
    let mut k = vec![0.0; h_len];
    let stop_cost = |x: u64| per_request * x as f64 + terminal(x);
    let p0 = pmf[0];
    for x in (0..h_len).rev() {
        let (mut sw, mut sk) = (0.0, 0.0);
        for (y, &p) in pmf.iter().enumerate().skip(1) {
            let next = x + y;
            if next < h_len {
                sw += p * w[next];
                sk += p * k[next];
            } else {
                sw += p * stop_cost(next as u64);
                sk += p;
            }
        }
        w[x] = (per_request * x as f64 + sw) / (1.0 - p0);
        k[x] = (1.0 + sk) / (1.0 - p0);
    }
    let (mut mean_cost, mut mean_len) = (0.0, 0.0);
    for (y, &p) in pmf.iter().enumerate() {
        if y < h_len {
            mean_cost += p * w[y];
            mean_len += p * k[y];
        } else {
            mean_cost += p * stop_cost(y as u64);
            mean_len += p;
        }
    }
    CycleStats { mean_len, mean_cost }
}

/// Renewal statistics of the same threshold policy estimated on a fixed
/// arrival sequence (common random numbers across thresholds). Only
/// completed cycles count.
pub fn threshold_cycle_mc(arrivals: &[u64], h: i64, per_request: f64) -> CycleStats {
    let mut x = match arrivals.first() {
        Some(&a) => a,
        None => return CycleStats { mean_len: f64::INFINITY, mean_cost: 0.0 },
    };
    let (mut acc_cost, mut acc_len) = (0.0, 0u64);
    let (mut total_cost, mut total_len, mut cycles) = (0.0, 0u64, 0u64);
    for &a in &arrivals[1..] {
        acc_cost += per_request * x as f64;
        acc_len += 1;
        if x as i64 > h {
            total_cost += acc_cost;
            total_len += acc_len;
            cycles += 1;
            acc_cost = 0.0;
            acc_len = 0;
            x = a;
        } else {
            x += a;
        }
    }
    if cycles == 0 {
        return CycleStats { mean_len: f64::INFINITY, mean_cost: 0.0 };
    }
    CycleStats { mean_len: total_len as f64 / cycles as f64, mean_cost: total_cost / cycles as f64 }
}

/// How latency-rate points are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CurveMethod {
    /// Renewal-reward simulation over `horizon` slots of one shared arrival sequence.
    MonteCarlo { horizon: usize, seed: u64 },
    /// Dynamic programming over the Poisson support.
    Exact,
}

impl Default for CurveMethod {
    fn default() -> Self {
        CurveMethod::MonteCarlo { horizon: 1_000_000, seed: 0 }
    }
}

/// Evaluates threshold policies for one arrival rate.
struct ThresholdEvaluator {
    lambda: f64,
    penalty: f64,
    arrivals: Option<Vec<u64>>,
}

impl ThresholdEvaluator {
    fn new(lambda: f64, penalty: f64, method: CurveMethod) -> Self {
        let arrivals = match method {
            CurveMethod::MonteCarlo { horizon, seed } => {
                let mut r = rng::stream(seed, Stream::MonteCarlo);
                Some((0..horizon).map(|_| rng::poisson(&mut r, lambda)).collect())
            }
            CurveMethod::Exact => None,
        };
        Self { lambda, penalty, arrivals }
    }

    fn point(&self, h: i64) -> CurvePoint {
        let stats = match &self.arrivals {
            Some(a) => threshold_cycle_mc(a, h, self.penalty),
            None => threshold_cycle_exact(self.lambda, h, self.penalty, &|_| 0.0),
        };
        let (rate, f) = if stats.mean_len.is_finite() { (stats.rate(), -stats.cost_rate()) } else { (0.0, f64::NEG_INFINITY) };
        CurvePoint { threshold: h, rate, f }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Threshold that produced the point (`-1` = every slot).
    pub threshold: i64,
    pub rate: f64,
    pub f: f64,
}

fn check_rate(target_rate: f64) -> Result<()> {
    if !(target_rate > 0.0 && target_rate <= 1.0) {
        return Err(Error::RateOutOfRange(target_rate));
    }
    Ok(())
}

/// `f` at `target_rate` for unit-penalty (or constant-penalty) requests:
/// the threshold policy whose cycle rate brackets the target, randomised
/// per cycle between the two bracketing thresholds.
pub fn latency_rate_threshold(lambda: f64, penalty: f64, target_rate: f64, method: CurveMethod) -> Result<f64> {
    check_rate(target_rate)?;
    if lambda <= 0.0 {
        return Ok(0.0);
    }
    let eval = ThresholdEvaluator::new(lambda, penalty, method);
    let top = eval.point(-1);
    if target_rate >= top.rate {
        return Ok(top.f);
    }
    // Exponential search then bisection for the last threshold whose rate
    // is still at or above the target.
    let (mut lo, mut hi) = (-1i64, 0i64);
    let mut hi_point = eval.point(hi);
    while hi_point.rate >= target_rate {
        lo = hi;
        hi = (hi + 1) * 2;
        hi_point = eval.point(hi);
        if hi > 1 << 40 {
            return Err(Error::RateOutOfRange(target_rate));
        }
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let p = eval.point(mid);
        if p.rate >= target_rate {
            lo = mid;
        } else {
            hi = mid;
            hi_point = p;
        }
    }
    let lo_point = eval.point(lo);
    Ok(interpolate(lo_point.rate, lo_point.f, hi_point.rate, hi_point.f, target_rate))
}

fn interpolate(r1: f64, f1: f64, r2: f64, f2: f64, r: f64) -> f64 {
    if (r1 - r2).abs() < 1e-15 {
        return f1.max(f2);
    }
    f1 + (f2 - f1) * (r - r1) / (r2 - r1)
}

/// Sampled latency-rate function of one message with its upper concave hull.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRateCurve {
    pub lambda: f64,
    /// Sampled points sorted by increasing rate.
    pub points: Vec<CurvePoint>,
    /// Vertices `(rate, f)` of the upper concave hull, increasing rate.
    pub hull: Vec<(f64, f64)>,
}

impl LatencyRateCurve {
    /// Threshold points from `-1` upward until the rate falls below `min_rate`.
    pub fn threshold(lambda: f64, penalty: f64, min_rate: f64, method: CurveMethod) -> Result<Self> {
        check_rate(min_rate)?;
        if lambda <= 0.0 {
            return Self::from_points(0.0, vec![CurvePoint { threshold: -1, rate: 1.0, f: 0.0 }]);
        }
        let eval = ThresholdEvaluator::new(lambda, penalty, method);
        let mut points = Vec::new();
        let mut h = -1i64;
        loop {
            let p = eval.point(h);
            let done = p.rate < min_rate || !p.f.is_finite();
            if p.f.is_finite() {
                points.push(p);
            }
            if done {
                break;
            }
            h += 1;
        }
        Self::from_points(lambda, points)
    }

    pub fn from_points(lambda: f64, mut points: Vec<CurvePoint>) -> Result<Self> {
        points.retain(|p| p.f.is_finite() && p.rate > 0.0);
        if points.is_empty() {
            return Err(Error::Config("latency-rate curve has no finite points".into()));
        }
        points.sort_by(|a, b| a.rate.total_cmp(&b.rate));
        let hull = upper_concave_hull(&points.iter().map(|p| (p.rate, p.f)).collect::<Vec<_>>());
        Ok(Self { lambda, points, hull })
    }

    pub fn min_rate(&self) -> f64 {
        self.hull[0].0
    }

    pub fn max_rate(&self) -> f64 {
        self.hull[self.hull.len() - 1].0
    }

    /// Hull value; `-inf` below the smallest sampled rate, flat above the largest.
    pub fn value(&self, rate: f64) -> f64 {
        if rate < self.min_rate() - 1e-12 {
            return f64::NEG_INFINITY;
        }
        if rate >= self.max_rate() {
            return self.hull[self.hull.len() - 1].1;
        }
        let i = self.hull.partition_point(|&(r, _)| r <= rate);
        if i == 0 {
            return self.hull[0].1;
        }
        let (r1, f1) = self.hull[i - 1];
        let (r2, f2) = self.hull[i];
        interpolate(r1, f1, r2, f2, rate)
    }

    /// Sampled points never decrease with rate (up to `tol`).
    pub fn is_non_decreasing(&self, tol: f64) -> bool {
        self.points.windows(2).all(|w| w[1].f >= w[0].f - tol)
    }

    /// Hull segments as `(slope, intercept)` pairs.
    fn segments(&self) -> Vec<(f64, f64)> {
        self.hull
            .windows(2)
            .map(|w| {
                let slope = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
                (slope, w[0].1 - slope * w[0].0)
            })
            .collect()
    }
}

/// Upper concave hull (monotone chain) of points sorted by x.
pub fn upper_concave_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for &p in points {
        if let Some(last) = hull.last() {
            if (p.0 - last.0).abs() < 1e-15 {
                if p.1 > last.1 {
                    hull.pop();
                } else {
                    continue;
                }
            }
        }
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    hull
}

// ---------------------------------------------------------------------------
// DQN estimate of the latency-rate function

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqnConfig {
    pub hidden: Vec<usize>,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub target_sync: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Steps over which epsilon decays linearly.
    pub epsilon_decay_steps: usize,
    pub learning_rate: f64,
    pub discount: f64,
    pub train_steps: usize,
    /// Training restarts from the empty buffer every `episode_len` steps.
    pub episode_len: usize,
    pub eval_horizon: usize,
    /// Multiplier of the squared rate-deviation penalty.
    pub rate_penalty_weight: f64,
    /// Multiplies rewards before they enter the TD targets.
    pub reward_scale: f64,
    pub buffer_len: usize,
    pub seed: u64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            replay_capacity: 10_000,
            batch_size: 32,
            target_sync: 500,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 10_000,
            learning_rate: 0.001,
            discount: 0.95,
            train_steps: 20_000,
            episode_len: 200,
            eval_horizon: 20_000,
            rate_penalty_weight: 1.0,
            reward_scale: 0.1,
            buffer_len: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DqnEstimate {
    pub f: f64,
    pub achieved_rate: f64,
    /// Achieved rate within 10% of the target.
    pub reliable: bool,
}

/// The single-message process with the inter-multicast clock `z`.
struct RateMdp<'a> {
    lambda: f64,
    penalty: &'a [f64],
    period: f64,
    weight: f64,
    q: Vec<u64>,
    z: f64,
}

impl RateMdp<'_> {
    fn features(&self) -> Vec<f64> {
        let scale = self.lambda.max(1.0);
        let mut f: Vec<f64> = self.q.iter().map(|&x| x as f64 / scale).collect();
        f.push(self.z / self.period);
        f
    }

    fn latency(&self) -> f64 {
        self.q.iter().zip(self.penalty).map(|(&x, &p)| x as f64 * p).sum()
    }

    /// Returns `(latency penalty, full reward)` and advances one slot.
    fn step<R: Rng + ?Sized>(&mut self, multicast: bool, rng: &mut R) -> (f64, f64) {
        let latency = self.latency();
        let mut reward = -latency;
        if multicast {
            reward -= self.weight * (self.z - self.period).powi(2);
        }
        let arrivals = rng::poisson(rng, self.lambda);
        self.q = shift_request_vector(&self.q, arrivals, multicast);
        self.z = if multicast { self.z + 1.0 - self.period } else { self.z + 1.0 };
        (latency, reward)
    }
}

/// One replayed transition with its fixed TD target.
#[derive(Debug, Clone, PartialEq)]
pub struct TdSample {
    pub features: Vec<f64>,
    pub action: usize,
    pub target: f64,
}

/// Mean squared TD error over a batch and its gradient for `net`.
pub fn dqn_loss(net: &DenseNet, batch: &[TdSample]) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let b = batch.len() as f64;
    let mut grads = GradientSet::zeros_like(net);
    let mut loss = 0.0;
    let mut out_grad = vec![0.0; net.output_len()];
    for s in batch {
        let (q, tape) = net.forward(&s.features)?;
        let err = q[s.action] - s.target;
        loss += err * err;
        out_grad.iter_mut().for_each(|g| *g = 0.0);
        out_grad[s.action] = 2.0 * err / b;
        net.backward_into(&tape, &out_grad, &mut grads)?;
    }
    Ok((loss / b, grads))
}

/// Trains a DQN on the rate-constrained single-message process and reports
/// the latency term of the greedy policy.
pub fn latency_rate_dqn(lambda: f64, penalty_fn: &[f64], target_rate: f64, cfg: &DqnConfig) -> Result<DqnEstimate> {
    check_rate(target_rate)?;
    if penalty_fn.len() != cfg.buffer_len {
        return Err(Error::Dimension { what: "penalty_fn", expected: cfg.buffer_len, found: penalty_fn.len() });
    }
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Config(format!("arrival rate {lambda} must be nonnegative")));
    }
    let mut init_rng = rng::stream(cfg.seed, Stream::NetInit);
    let mut sizes = vec![cfg.buffer_len + 1];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(2);
    let mut online = DenseNet::new(&sizes, Activation::Relu, OutputHead::Linear, &mut init_rng)?;
    let mut target = online.clone();
    let mut env_rng = rng::stream(cfg.seed, Stream::Arrivals);
    let mut explore = rng::stream(cfg.seed, Stream::Exploration);
    let mut replay_rng = rng::stream(cfg.seed, Stream::Replay);
    let mut mdp = RateMdp {
        lambda,
        penalty: penalty_fn,
        period: 1.0 / target_rate,
        weight: cfg.rate_penalty_weight,
        q: vec![0; cfg.buffer_len],
        z: 1.0,
    };
    let mut replay: Vec<(Vec<f64>, usize, f64, Vec<f64>)> = Vec::with_capacity(cfg.replay_capacity);
    let mut cursor = 0usize;
    for step in 0..cfg.train_steps {
        if step % cfg.episode_len.max(1) == 0 {
            mdp.q = vec![0; cfg.buffer_len];
            mdp.z = 1.0;
        }
        let frac = (step as f64 / cfg.epsilon_decay_steps.max(1) as f64).min(1.0);
        let eps = cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac;
        let feats = mdp.features();
        let action = if explore.random::<f64>() < eps { explore.random_range(0..2) } else { argmax(&online.predict(&feats)?) };
        let (_, reward) = mdp.step(action == 1, &mut env_rng);
        let transition = (feats, action, reward * cfg.reward_scale, mdp.features());
        if replay.len() < cfg.replay_capacity {
            replay.push(transition);
        } else {
            replay[cursor] = transition;
        }
        cursor = (cursor + 1) % cfg.replay_capacity.max(1);
        if replay.len() >= cfg.batch_size {
            let batch = (0..cfg.batch_size)
                .map(|_| {
                    let (s, a, r, s2) = &replay[replay_rng.random_range(0..replay.len())];
                    let next = target.predict(s2)?;
                    Ok(TdSample { features: s.clone(), action: *a, target: r + cfg.discount * next[0].max(next[1]) })
                })
                .collect::<Result<Vec<_>>>()?;
            let (_, grads) = dqn_loss(&online, &batch)?;
            online.optimizer_step(&grads, cfg.learning_rate)?;
        }
        if (step + 1) % cfg.target_sync.max(1) == 0 {
            target = online.clone();
        }
    }
    // Greedy evaluation from a fresh start.
    mdp.q = vec![0; cfg.buffer_len];
    mdp.z = 1.0;
    let mut eval_rng = rng::stream(cfg.seed ^ 0x5EED, Stream::Arrivals);
    let (mut latency, mut multicasts) = (0.0, 0u64);
    for _ in 0..cfg.eval_horizon {
        let a = argmax(&online.predict(&mdp.features())?);
        multicasts += a as u64;
        latency += mdp.step(a == 1, &mut eval_rng).0;
    }
    let horizon = cfg.eval_horizon.max(1) as f64;
    let achieved_rate = multicasts as f64 / horizon;
    Ok(DqnEstimate {
        f: -latency / horizon,
        achieved_rate,
        reliable: (achieved_rate - target_rate).abs() <= 0.1 * target_rate,
    })
}

fn argmax(q: &[f64]) -> usize {
    // Ties go to the lower index.
    usize::from(q[1] > q[0])
}

// ---------------------------------------------------------------------------
// Rate allocation

/// Long-run multicast starts per slot for every (message, channel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMatrix {
    pub rates: Vec<Vec<f64>>,
}

impl RateMatrix {
    /// Per-channel busy fraction `sum_n rates[n][m] * T[n][m]`.
    pub fn channel_loads(&self, duration_table: &[Vec<u32>]) -> Vec<f64> {
        let m = self.rates.first().map_or(0, Vec::len);
        (0..m)
            .map(|c| self.rates.iter().zip(duration_table).map(|(r, t)| r[c] * f64::from(t[c])).sum())
            .collect()
    }

    pub fn satisfies_capacity(&self, duration_table: &[Vec<u32>], tol: f64) -> bool {
        self.channel_loads(duration_table).iter().all(|&l| l <= 1.0 + tol)
            && self.rates.iter().flatten().all(|&r| (-tol..=1.0 + tol).contains(&r))
    }

    pub fn aggregate(&self) -> Vec<f64> {
        self.rates.iter().map(|r| r.iter().sum()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSolution {
    pub rates: RateMatrix,
    /// `-V * energy - latency`.
    pub bound: f64,
    /// `sum e[n][m] * rates[n][m]`: minimum energy per slot.
    pub energy: f64,
    /// `-sum_n f_n(aggregate rate of n)`.
    pub latency: f64,
}

/// Maximises `-V * sum e*rate + sum_n f_n(sum_m rate[n][m])` over rates in
/// `[0, 1]` with per-channel load at most 1.
///
/// The hulls are piecewise linear and concave, so the problem is a linear
/// program in the rates plus one epigraph variable per message.
pub fn solve_allocation(curves: &[LatencyRateCurve], min_energy: &[Vec<f64>], duration_table: &[Vec<u32>], v: f64) -> Result<BoundSolution> {
    let n = curves.len();
    if min_energy.len() != n || duration_table.len() != n {
        return Err(Error::Dimension { what: "allocation tables", expected: n, found: min_energy.len() });
    }
    let m = min_energy.first().map_or(0, Vec::len);
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let gamma: Vec<Vec<_>> = (0..n).map(|i| (0..m).map(|c| lp.add_var(-v * min_energy[i][c], (0.0, 1.0))).collect()).collect();
    let y: Vec<_> = (0..n).map(|_| lp.add_var(1.0, (f64::NEG_INFINITY, f64::INFINITY))).collect();
    for (i, curve) in curves.iter().enumerate() {
        let row: Vec<_> = gamma[i].iter().map(|&g| (g, 1.0)).collect();
        lp.add_constraint(row.as_slice(), ComparisonOp::Le, 1.0);
        lp.add_constraint(row.as_slice(), ComparisonOp::Ge, curve.min_rate());
        let segments = curve.segments();
        if segments.is_empty() {
            lp.add_constraint([(y[i], 1.0)], ComparisonOp::Le, curve.hull[0].1);
        }
        for (slope, intercept) in segments {
            // y <= intercept + slope * sum_m gamma
            let mut terms = vec![(y[i], 1.0)];
            terms.extend(gamma[i].iter().map(|&g| (g, -slope)));
            lp.add_constraint(terms.as_slice(), ComparisonOp::Le, intercept);
        }
    }
    for c in 0..m {
        let terms: Vec<_> = (0..n).map(|i| (gamma[i][c], f64::from(duration_table[i][c]))).collect();
        lp.add_constraint(terms.as_slice(), ComparisonOp::Le, 1.0);
    }
    let solution = lp
        .solve()
        .map_err(|e| Error::Solver(e.to_string()))?
        .into_solution()
        .map_err(|_| Error::Solver("interrupted".into()))?;
    let rates = RateMatrix {
        rates: gamma.iter().map(|row| row.iter().map(|&g| solution.var_value(g).clamp(0.0, 1.0)).collect()).collect(),
    };
    Ok(evaluate_allocation(curves, min_energy, v, rates))
}

/// Objective value of a given rate matrix.
pub fn evaluate_allocation(curves: &[LatencyRateCurve], min_energy: &[Vec<f64>], v: f64, rates: RateMatrix) -> BoundSolution {
    let energy: f64 = rates.rates.iter().flatten().zip(min_energy.iter().flatten()).map(|(r, e)| r * e).sum();
    let latency: f64 = -curves.iter().zip(rates.aggregate()).map(|(c, r)| c.value(r)).sum::<f64>();
    BoundSolution { rates, bound: -v * energy - latency, energy, latency }
}

/// Latency-rate curves of every message of a scenario; penalties must be
/// constant across ages.
pub fn threshold_curves(cfg: &EnvConfig, min_rate: f64, method: CurveMethod) -> Result<Vec<LatencyRateCurve>> {
    cfg.arrival_rates
        .iter()
        .zip(&cfg.penalty_fn)
        .enumerate()
        .map(|(n, (&lambda, p))| {
            if p.iter().any(|&x| (x - p[0]).abs() > 1e-12) {
                return Err(Error::NotApplicable(format!("message {} has an age-dependent penalty; use the DQN curve", n + 1)));
            }
            let method = match method {
                CurveMethod::MonteCarlo { horizon, seed } => CurveMethod::MonteCarlo { horizon, seed: seed.wrapping_add(n as u64) },
                m => m,
            };
            LatencyRateCurve::threshold(lambda, p[0], min_rate, method)
        })
        .collect()
}

/// Latency-rate curve from DQN estimates on a rate grid; unreliable points
/// are dropped, and points are placed at the achieved rate.
pub fn dqn_curve(lambda: f64, penalty_fn: &[f64], rates: &[f64], cfg: &DqnConfig) -> Result<LatencyRateCurve> {
    let mut points = Vec::new();
    for &r in rates {
        let est = latency_rate_dqn(lambda, penalty_fn, r, cfg)?;
        if est.reliable && est.achieved_rate > 0.0 {
            points.push(CurvePoint { threshold: -1, rate: est.achieved_rate, f: est.f });
        }
    }
    LatencyRateCurve::from_points(lambda, points)
}

/// Bound computation for a whole scenario at one `V`.
pub fn scenario_bound(cfg: &EnvConfig, curves: &[LatencyRateCurve]) -> Result<BoundSolution> {
    let e = min_energy_table(&cfg.duration_table, &cfg.energy_const, cfg.max_gain());
    solve_allocation(curves, &e, &cfg.duration_table, cfg.tradeoff_v)
}

/// The bound dominates a measured average reward up to `sigmas` standard errors.
pub fn dominance_check(bound: f64, measured_reward: f64, measured_stderr: f64, sigmas: f64) -> bool {
    bound >= measured_reward - sigmas * measured_stderr
}

pub fn write_curves_csv<W: Write>(curves: &[LatencyRateCurve], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["message", "threshold", "rate", "f", "hull_f"])?;
    for (n, c) in curves.iter().enumerate() {
        for p in &c.points {
            w.write_record([
                (n + 1).to_string(),
                p.threshold.to_string(),
                p.rate.to_string(),
                p.f.to_string(),
                c.value(p.rate).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub v: f64,
    pub bound: f64,
    pub energy: f64,
    pub latency: f64,
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["v", "bound", "energy", "latency"])?;
    for r in rows {
        w.write_record([r.v.to_string(), r.bound.to_string(), r.energy.to_string(), r.latency.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::tests::config;
    use crate::env::Env;

    fn starts(choices: &[usize]) -> Vec<JointAction> {
        choices.iter().map(|&a| JointAction::new(vec![a])).collect()
    }

    #[test]
    fn unit_durations_always_fit() {
        let trace = starts(&[1; 50]);
        let r = check_capacity(&trace, &[vec![1]]);
        assert!(r.feasible);
        assert_eq!(r.loads, vec![1.0]);
    }

    #[test]
    fn overlapping_long_multicasts_flagged() {
        let mut c = vec![1, 1, 1, 1];
        c.extend([0; 6]);
        let r = check_capacity(&starts(&c), &[vec![3]]);
        assert!(!r.feasible);
        assert!((r.loads[0] - 1.2).abs() < 1e-12);
        assert_eq!(r.first_violation, Some((2, 0)));
    }

    #[test]
    fn spaced_long_multicasts_pass() {
        let r = check_capacity(&starts(&[1, 0, 0, 1, 0, 0, 1, 0, 0]), &[vec![3]]);
        assert!(r.feasible);
    }

    #[test]
    fn random_env_trajectories_respect_capacity() {
        let mut cfg = config(3, 2);
        cfg.duration_table = vec![vec![1, 3], vec![2, 5], vec![4, 1]];
        let mut env = Env::new(cfg.clone()).unwrap();
        let mut pick = rng::stream(1, Stream::MonteCarlo);
        let mut tracker = CapacityTracker::new(2);
        let mut trace = Vec::new();
        for _ in 0..100_000 {
            let s = env.state().clone();
            let mut used = vec![false; 4];
            let choices = (0..2)
                .map(|m| {
                    if s.channel_avail[m] > 0 {
                        return 0;
                    }
                    let a = pick.random_range(0..4);
                    if a > 0 && !used[a] {
                        used[a] = true;
                        a
                    } else {
                        0
                    }
                })
                .collect();
            let a = JointAction::new(choices);
            env.step(&a).unwrap();
            tracker.record(&cfg, &a, &env.state().channel_avail).unwrap();
            trace.push(a);
        }
        assert!(check_capacity(&trace, &cfg.duration_table).feasible);
        assert!(tracker.loads().iter().all(|&l| l <= 1.0));
    }

    #[test]
    fn minimum_energy_examples() {
        let e = min_energy_table(&[vec![1, 2]], &[vec![500.0, 500.0]], 110.0);
        assert!((e[0][0] - 4.545454545454545).abs() < 1e-12);
        assert!((e[0][1] - 2.0 * e[0][0]).abs() < 1e-12);
        assert!(e.iter().flatten().all(|&x| x > 0.0));
    }

    /// Long simulation of the threshold policy, independent of the cycle code.
    fn simulate_threshold(lambda: f64, h: i64, slots: usize, seed: u64) -> (f64, f64) {
        let mut r = rng::stream(seed, Stream::MonteCarlo);
        let mut x = 0u64;
        let (mut cost, mut starts) = (0.0, 0u64);
        for _ in 0..slots {
            cost += x as f64;
            let a = rng::poisson(&mut r, lambda);
            if x as i64 > h {
                starts += 1;
                x = a;
            } else {
                x += a;
            }
        }
        (starts as f64 / slots as f64, -cost / slots as f64)
    }

    #[test]
    fn exact_cycles_match_simulation() {
        for (lambda, h) in [(2.0, -1), (2.0, 0), (2.0, 3), (0.7, 2), (5.0, 10)] {
            let s = threshold_cycle_exact(lambda, h, 1.0, &|_| 0.0);
            let (rate, f) = simulate_threshold(lambda, h, 400_000, 9);
            assert!((s.rate() - rate).abs() < 0.01 * rate, "rate {lambda} {h}: {} vs {rate}", s.rate());
            assert!((-s.cost_rate() - f).abs() < 0.02 * f.abs(), "f {lambda} {h}: {} vs {f}", -s.cost_rate());
        }
    }

    #[test]
    fn every_slot_multicast_costs_lambda() {
        let s = threshold_cycle_exact(2.0, -1, 1.0, &|_| 0.0);
        assert!((s.mean_len - 1.0).abs() < 1e-12);
        assert!((s.cost_rate() - 2.0).abs() < 1e-12);
        let f = latency_rate_threshold(2.0, 1.0, 1.0, CurveMethod::Exact).unwrap();
        assert!((f + 2.0).abs() < 1e-12);
        let mc = latency_rate_threshold(2.0, 1.0, 1.0, CurveMethod::default()).unwrap();
        assert!((mc + 2.0).abs() < 0.01);
    }

    #[test]
    fn mc_agrees_with_exact() {
        let a: Vec<u64> = {
            let mut r = rng::stream(4, Stream::MonteCarlo);
            (0..1_000_000).map(|_| rng::poisson(&mut r, 3.0)).collect()
        };
        for h in [-1, 0, 2, 7] {
            let mc = threshold_cycle_mc(&a, h, 1.0);
            let ex = threshold_cycle_exact(3.0, h, 1.0, &|_| 0.0);
            assert!((mc.cost_rate() - ex.cost_rate()).abs() < 0.01 * ex.cost_rate());
            assert!((mc.rate() - ex.rate()).abs() < 0.01 * ex.rate());
        }
    }

    #[test]
    fn rate_out_of_range_rejected() {
        for r in [0.0, 1.5, -0.1] {
            assert!(matches!(latency_rate_threshold(2.0, 1.0, r, CurveMethod::Exact), Err(Error::RateOutOfRange(_))));
        }
    }

    #[test]
    fn lower_rates_cost_more() {
        let mut last = f64::INFINITY;
        for r in [1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01] {
            let f = latency_rate_threshold(2.0, 1.0, r, CurveMethod::Exact).unwrap();
            assert!(f < last, "f({r}) = {f} not below {last}");
            last = f;
        }
        assert!(last < -50.0);
        let half = latency_rate_threshold(2.0, 1.0, 0.5, CurveMethod::default()).unwrap();
        let full = latency_rate_threshold(2.0, 1.0, 1.0, CurveMethod::default()).unwrap();
        assert!(half <= full);
    }

    #[test]
    fn mixing_hits_bracketing_line() {
        let lo = threshold_cycle_exact(2.0, 2, 1.0, &|_| 0.0);
        let hi = threshold_cycle_exact(2.0, 3, 1.0, &|_| 0.0);
        let r = 0.5 * (lo.rate() + hi.rate());
        let f = latency_rate_threshold(2.0, 1.0, r, CurveMethod::Exact).unwrap();
        // Per-cycle mixing: E[cost] and E[len] mix linearly.
        let theta = (hi.mean_len - 1.0 / r) / (hi.mean_len - lo.mean_len);
        let mixed = -(theta * lo.mean_cost + (1.0 - theta) * hi.mean_cost) * r;
        assert!((f - mixed).abs() < 1e-9, "{f} vs {mixed}");
    }

    #[test]
    fn curves_are_monotone_with_concave_hull() {
        for method in [CurveMethod::Exact, CurveMethod::MonteCarlo { horizon: 200_000, seed: 2 }] {
            let c = LatencyRateCurve::threshold(2.0, 1.0, 0.02, method).unwrap();
            assert!(c.is_non_decreasing(1e-9));
            for w in c.hull.windows(3) {
                let s1 = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
                let s2 = (w[2].1 - w[1].1) / (w[2].0 - w[1].0);
                assert!(s2 <= s1 + 1e-12);
            }
            for p in &c.points {
                assert!(c.value(p.rate) >= p.f - 1e-9);
            }
            assert_eq!(c.value(0.001), f64::NEG_INFINITY);
        }
    }

    #[test]
    fn zero_arrivals_give_zero_latency() {
        assert_eq!(latency_rate_threshold(0.0, 1.0, 0.3, CurveMethod::Exact).unwrap(), 0.0);
        let c = LatencyRateCurve::threshold(0.0, 1.0, 0.02, CurveMethod::Exact).unwrap();
        assert_eq!(c.value(1.0), 0.0);
    }

    #[test]
    fn hull_of_known_points() {
        let pts = [(0.0, 0.0), (1.0, 0.5), (2.0, 2.0), (3.0, 2.5), (4.0, 2.0)];
        assert_eq!(upper_concave_hull(&pts), vec![(0.0, 0.0), (2.0, 2.0), (3.0, 2.5), (4.0, 2.0)]);
    }

    #[test]
    fn single_channel_zero_v_bound_is_minus_lambda() {
        let curve = LatencyRateCurve::threshold(2.0, 1.0, 0.02, CurveMethod::Exact).unwrap();
        let e = min_energy_table(&[vec![1]], &[vec![500.0]], 110.0);
        let sol = solve_allocation(&[curve], &e, &[vec![1]], 0.0).unwrap();
        assert!((sol.bound + 2.0).abs() < 1e-9, "{}", sol.bound);
    }

    fn synthetic(points: &[(f64, f64)]) -> LatencyRateCurve {
        LatencyRateCurve::from_points(1.0, points.iter().map(|&(rate, f)| CurvePoint { threshold: 0, rate, f }).collect()).unwrap()
    }

    /// Exhaustive search over rate matrices on a grid.
    fn grid_oracle(curves: &[LatencyRateCurve], e: &[Vec<f64>], t: &[Vec<u32>], v: f64, step: f64) -> f64 {
        let n = curves.len();
        let m = e[0].len();
        let levels = (1.0 / step).round() as usize;
        let cells = n * m;
        let mut idx = vec![0usize; cells];
        let mut best = f64::NEG_INFINITY;
        loop {
            let rates: Vec<Vec<f64>> = (0..n).map(|i| (0..m).map(|c| idx[i * m + c] as f64 * step).collect()).collect();
            let rm = RateMatrix { rates };
            if rm.satisfies_capacity(t, 1e-12) && rm.aggregate().iter().all(|&r| r <= 1.0 + 1e-12) {
                let val = evaluate_allocation(curves, e, v, rm).bound;
                best = best.max(val);
            }
            let mut k = 0;
            loop {
                if k == cells {
                    return best;
                }
                idx[k] += 1;
                if idx[k] <= levels {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }

    #[test]
    fn allocation_matches_grid_search() {
        let c1 = synthetic(&[(0.1, -20.0), (0.25, -6.0), (0.5, -3.0), (1.0, -2.0)]);
        let c2 = synthetic(&[(0.05, -60.0), (0.2, -14.0), (0.5, -8.0), (0.75, -7.5), (1.0, -7.0)]);
        let e = vec![vec![4.0, 5.0], vec![4.5, 3.0]];
        let t = vec![vec![1, 1], vec![1, 1]];
        for v in [0.0, 0.5, 2.0, 10.0] {
            let lp = solve_allocation(&[c1.clone(), c2.clone()], &e, &t, v).unwrap();
            let grid = grid_oracle(&[c1.clone(), c2.clone()], &e, &t, v, 0.05);
            assert!(lp.bound >= grid - 1e-9, "v={v}: lp {} < grid {grid}", lp.bound);
            assert!((lp.bound - grid).abs() < 1e-6, "v={v}: lp {} grid {grid}", lp.bound);
            assert!(lp.rates.satisfies_capacity(&t, 1e-9));
        }
    }

    #[test]
    fn allocation_with_long_durations_is_capacity_feasible() {
        let c1 = synthetic(&[(0.1, -20.0), (0.5, -3.0), (1.0, -2.0)]);
        let c2 = synthetic(&[(0.1, -30.0), (0.5, -5.0), (1.0, -4.0)]);
        let e = vec![vec![4.0, 9.0], vec![13.0, 4.5]];
        let t = vec![vec![2, 3], vec![4, 1]];
        let lp = solve_allocation(&[c1.clone(), c2.clone()], &e, &t, 0.3).unwrap();
        assert!(lp.rates.satisfies_capacity(&t, 1e-9));
        let grid = grid_oracle(&[c1, c2], &e, &t, 0.3, 0.05);
        assert!(lp.bound >= grid - 1e-9);
    }

    #[test]
    fn energy_falls_as_v_grows() {
        let cfg = config(2, 2);
        let curves = threshold_curves(&cfg, 0.02, CurveMethod::Exact).unwrap();
        let e = min_energy_table(&cfg.duration_table, &cfg.energy_const, cfg.max_gain());
        let mut last_energy = f64::INFINITY;
        for v in [0.0, 0.1, 0.5, 1.0, 5.0, 20.0, 100.0] {
            let s = solve_allocation(&curves, &e, &cfg.duration_table, v).unwrap();
            assert!(s.energy <= last_energy + 1e-9);
            last_energy = s.energy;
        }
    }

    #[test]
    fn zero_v_pushes_rates_to_capacity() {
        let cfg = config(2, 2);
        let curves = threshold_curves(&cfg, 0.02, CurveMethod::Exact).unwrap();
        let e = min_energy_table(&cfg.duration_table, &cfg.energy_const, cfg.max_gain());
        let s = solve_allocation(&curves, &e, &cfg.duration_table, 0.0).unwrap();
        // Multicasting an empty buffer changes nothing, so the flat top of
        // each curve starts below rate 1.
        for (agg, c) in s.rates.aggregate().iter().zip(&curves) {
            assert!((c.value(*agg) + 2.0).abs() < 1e-9);
        }
        assert!((s.bound + 4.0).abs() < 1e-9);
    }

    #[test]
    fn dominance_examples() {
        assert!(dominance_check(-2.0, -2.0, 0.0, 3.0));
        assert!(dominance_check(-2.0, -1.95, 0.02, 3.0));
        assert!(!dominance_check(-2.0, -1.5, 0.01, 3.0));
    }

    #[test]
    fn dqn_loss_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let err = crate::gradcheck::dqn_loss_error(seed);
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    fn quick_dqn() -> DqnConfig {
        DqnConfig { hidden: vec![16], train_steps: 4000, epsilon_decay_steps: 2000, eval_horizon: 20_000, ..DqnConfig::default() }
    }

    #[test]
    fn dqn_full_rate_matches_threshold() {
        let est = latency_rate_dqn(2.0, &[1.0; 4], 1.0, &quick_dqn()).unwrap();
        assert!(est.reliable, "{est:?}");
        let exact = latency_rate_threshold(2.0, 1.0, 1.0, CurveMethod::Exact).unwrap();
        assert!((est.f - exact).abs() < 0.05 * exact.abs(), "{est:?}");
    }

    #[test]
    fn dqn_linear_penalty_at_full_rate() {
        let est = latency_rate_dqn(2.0, &[1.0, 2.0, 3.0, 4.0], 1.0, &quick_dqn()).unwrap();
        assert!(est.reliable);
        assert!((est.f + 2.0).abs() < 0.05 * 2.0, "{est:?}");
    }

    #[test]
    fn dqn_without_arrivals_has_no_latency() {
        let est = latency_rate_dqn(0.0, &[1.0; 4], 0.5, &DqnConfig { train_steps: 500, ..quick_dqn() }).unwrap();
        assert_eq!(est.f, 0.0);
    }
}
