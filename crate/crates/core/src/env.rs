//! The multi-message, multi-channel multicast scheduling process.
//!
//! State is the request matrix (per-message, age-indexed counts of buffered
//! requests), the per-channel remaining busy time and the per-(message,
//! channel) worst buffered channel gain. Each slot the scheduler picks one
//! message (or none) per channel; the slot reward charges multicast energy
//! and the latency penalty of everything still buffered.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::rng::{self, Stream, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub n_messages: usize,
    pub n_channels: usize,
    /// Length of each per-message request vector; older requests pile up in
    /// the last entry.
    pub buffer_len: usize,
    /// Mean Poisson arrivals per slot, one per message.
    pub arrival_rates: Vec<f64>,
    /// Slots a multicast of message `n` occupies channel `m` (row `n`, column `m`).
    pub duration_table: Vec<Vec<u32>>,
    /// Per-slot energy constant of message `n` on channel `m`.
    pub energy_const: Vec<Vec<f64>>,
    /// Weight of energy against latency penalty in the reward.
    pub tradeoff_v: f64,
    /// `penalty_fn[n][tau - 1]` is the per-slot penalty of a request of
    /// message `n` that has waited `tau` slots.
    pub penalty_fn: Vec<Vec<f64>>,
    /// Support of the i.i.d. uniform per-request channel gain.
    pub gain_support: Vec<f64>,
    pub seed: u64,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n_messages, self.n_channels);
        let bad = |msg: String| Err(Error::Config(msg));
        if n == 0 || m == 0 {
            return bad("n_messages and n_channels must be positive".into());
        }
        if self.buffer_len < 2 {
            return bad(format!("buffer_len must be >= 2, got {}", self.buffer_len));
        }
        if self.arrival_rates.len() != n {
            return bad(format!("arrival_rates has {} entries, expected {n}", self.arrival_rates.len()));
        }
        if let Some(r) = self.arrival_rates.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return bad(format!("arrival rate {r} is not a positive finite number"));
        }
        check_table(&self.duration_table, n, m, "duration_table")?;
        if self.duration_table.iter().flatten().any(|&d| d < 1) {
            return bad("duration entries must be >= 1".into());
        }
        check_table(&self.energy_const, n, m, "energy_const")?;
        if self.energy_const.iter().flatten().any(|z| !(z.is_finite() && *z > 0.0)) {
            return bad("energy constants must be positive".into());
        }
        if !(self.tradeoff_v.is_finite() && self.tradeoff_v >= 0.0) {
            return bad(format!("tradeoff_v must be >= 0, got {}", self.tradeoff_v));
        }
        check_table(&self.penalty_fn, n, self.buffer_len, "penalty_fn")?;
        if self.penalty_fn.iter().flatten().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return bad("penalties must be nonnegative".into());
        }
        if self.gain_support.is_empty() {
            return bad("gain_support is empty".into());
        }
        if self.gain_support.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return bad("gain_support entries must be positive".into());
        }
        Ok(())
    }

    /// Largest channel gain `L`.
    pub fn max_gain(&self) -> f64 {
        self.gain_support.iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn min_gain(&self) -> f64 {
        self.gain_support.iter().copied().fold(f64::MAX, f64::min)
    }

    pub fn max_duration(&self) -> u32 {
        self.duration_table.iter().flatten().copied().max().unwrap_or(1)
    }

    /// Dimension of one agent's flattened observation.
    pub fn observation_len(&self) -> usize {
        self.n_messages * self.buffer_len + 1 + self.n_messages
    }

    /// Dimension of the flattened global state.
    pub fn state_len(&self) -> usize {
        self.n_messages * self.buffer_len + self.n_channels + self.n_messages * self.n_channels
    }

    /// All-empty buffers, idle channels and every gain at its maximum.
    pub fn init_state(&self) -> EnvState {
        let l = self.max_gain();
        EnvState {
            request_matrix: vec![vec![0; self.buffer_len]; self.n_messages],
            channel_avail: vec![0; self.n_channels],
            channel_status: vec![vec![l; self.n_channels]; self.n_messages],
            clock: 1,
        }
    }

    fn check_dims(&self, state: &EnvState, action: &JointAction) -> Result<()> {
        if action.choices.len() != self.n_channels {
            return Err(Error::Dimension {
                what: "joint action",
                expected: self.n_channels,
                found: action.choices.len(),
            });
        }
        if state.channel_avail.len() != self.n_channels || state.request_matrix.len() != self.n_messages {
            return Err(Error::Dimension {
                what: "state",
                expected: self.n_channels,
                found: state.channel_avail.len(),
            });
        }
        if let Some(&bad) = action.choices.iter().find(|&&a| a > self.n_messages) {
            return Err(Error::IndexOutOfRange { index: bad, len: self.n_messages + 1 });
        }
        Ok(())
    }

    /// Busy-channel check only; duplicates are allowed.
    pub fn check_busy(&self, state: &EnvState, action: &JointAction) -> Result<(), Violation> {
        for (m, (&a, &c)) in action.choices.iter().zip(&state.channel_avail).enumerate() {
            if a != 0 && c > 0 {
                return Err(Violation::BusyChannel { channel: m, remaining: c });
            }
        }
        Ok(())
    }

    /// Both constraints, reporting the first one broken.
    pub fn check_action(&self, state: &EnvState, action: &JointAction) -> Result<(), Violation> {
        self.check_busy(state, action)?;
        let mut first_channel = vec![usize::MAX; self.n_messages + 1];
        for (m, &a) in action.choices.iter().enumerate() {
            if a == 0 {
                continue;
            }
            if first_channel[a] != usize::MAX {
                return Err(Violation::DuplicateMessage { message: a, first: first_channel[a], second: m });
            }
            first_channel[a] = m;
        }
        Ok(())
    }

    pub fn feasible(&self, state: &EnvState, action: &JointAction) -> Result<bool> {
        self.check_dims(state, action)?;
        Ok(self.check_action(state, action).is_ok())
    }

    /// Energy of the multicasts started by `action` in `state`.
    pub fn energy(&self, state: &EnvState, action: &JointAction) -> f64 {
        action
            .choices
            .iter()
            .enumerate()
            .filter(|(_, &a)| a > 0)
            .map(|(m, &a)| {
                let n = a - 1;
                self.duration_table[n][m] as f64 * self.energy_const[n][m] / state.channel_status[n][m]
            })
            .sum()
    }

    pub fn latency(&self, state: &EnvState) -> f64 {
        instant_latency_penalty(&state.request_matrix, &self.penalty_fn)
    }

    /// Slot reward charged on the pre-transition state.
    pub fn outcome(&self, state: &EnvState, action: &JointAction) -> SlotOutcome {
        let energy = self.energy(state, action);
        let latency = self.latency(state);
        SlotOutcome { reward: -(self.tradeoff_v * energy + latency), energy, latency }
    }

    /// Deterministic transition given this slot's exogenous draws. The action
    /// is assumed to satisfy at least the busy-channel constraint.
    pub fn transition(&self, state: &EnvState, action: &JointAction, draws: &SlotDraws) -> EnvState {
        let l = self.max_gain();
        let mut multicast = vec![false; self.n_messages];
        for &a in &action.choices {
            if a > 0 {
                multicast[a - 1] = true;
            }
        }
        let request_matrix = state
            .request_matrix
            .iter()
            .zip(&draws.arrivals)
            .zip(&multicast)
            .map(|((q, &new), &b)| shift_request_vector(q, new, b))
            .collect();
        let channel_avail = state
            .channel_avail
            .iter()
            .zip(&action.choices)
            .enumerate()
            .map(|(m, (&c, &a))| match (c, a) {
                (c, _) if c > 0 => c - 1,
                (_, 0) => 0,
                (_, a) => self.duration_table[a - 1][m] - 1,
            })
            .collect();
        let channel_status = state
            .channel_status
            .iter()
            .enumerate()
            .map(|(n, row)| {
                row.iter()
                    .enumerate()
                    .map(|(m, &g)| fold_worst_gain(g, draws.worst_new_gain[n][m], multicast[n], l))
                    .collect()
            })
            .collect();
        EnvState { request_matrix, channel_avail, channel_status, clock: state.clock + 1 }
    }

    /// One constrained slot: rejects infeasible actions, never repairs them.
    pub fn step(
        &self,
        state: &EnvState,
        action: &JointAction,
        exo: &mut ExogenousRng,
    ) -> Result<(EnvState, SlotOutcome)> {
        self.check_dims(state, action)?;
        self.check_action(state, action).map_err(Error::Constraint)?;
        let outcome = self.outcome(state, action);
        let draws = exo.draw(self);
        Ok((self.transition(state, action, &draws), outcome))
    }

    /// Like [`EnvConfig::step`] but tolerates duplicate messages across
    /// channels; each duplicate is charged its own energy. Only meant for the
    /// unconstrained ablation.
    pub fn step_relaxed(
        &self,
        state: &EnvState,
        action: &JointAction,
        exo: &mut ExogenousRng,
    ) -> Result<(EnvState, SlotOutcome)> {
        self.check_dims(state, action)?;
        self.check_busy(state, action).map_err(Error::Constraint)?;
        let outcome = self.outcome(state, action);
        let draws = exo.draw(self);
        Ok((self.transition(state, action, &draws), outcome))
    }

    pub fn observe(&self, state: &EnvState, m: usize) -> Result<AgentObservation> {
        if m >= self.n_channels {
            return Err(Error::IndexOutOfRange { index: m, len: self.n_channels });
        }
        Ok(AgentObservation {
            request_matrix: state.request_matrix.clone(),
            own_avail: state.channel_avail[m],
            own_gains: state.channel_status.iter().map(|row| row[m]).collect(),
        })
    }
}

fn check_table<T>(table: &[Vec<T>], rows: usize, cols: usize, name: &str) -> Result<()> {
    if table.len() != rows || table.iter().any(|r| r.len() != cols) {
        return Err(Error::Config(format!("{name} must be {rows}x{cols}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub request_matrix: Vec<Vec<u64>>,
    /// Remaining busy slots per channel; 0 means free.
    pub channel_avail: Vec<u32>,
    pub channel_status: Vec<Vec<f64>>,
    pub clock: u64,
}

impl EnvState {
    /// Row-major `Q`, then `c`, then `G`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.request_matrix.iter().flatten().map(|&q| q as f64));
        out.extend(self.channel_avail.iter().map(|&c| c as f64));
        out.extend(self.channel_status.iter().flatten().copied());
        out
    }

    /// Total buffered requests of each message.
    pub fn request_totals(&self) -> Vec<u64> {
        self.request_matrix.iter().map(|q| q.iter().sum()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointAction {
    /// `choices[m]` is 0 for idle, otherwise the 1-based message index.
    pub choices: Vec<usize>,
}

impl JointAction {
    pub fn new(choices: Vec<usize>) -> Self {
        Self { choices }
    }

    pub fn idle(n_channels: usize) -> Self {
        Self { choices: vec![0; n_channels] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentObservation {
    pub request_matrix: Vec<Vec<u64>>,
    pub own_avail: u32,
    pub own_gains: Vec<f64>,
}

impl AgentObservation {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.request_matrix.iter().flatten().map(|&q| q as f64).collect();
        out.push(self.own_avail as f64);
        out.extend_from_slice(&self.own_gains);
        out
    }

    pub fn is_busy(&self) -> bool {
        self.own_avail > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotOutcome {
    pub reward: f64,
    pub energy: f64,
    pub latency: f64,
}

/// Exogenous randomness of one slot: new requests per message and, per
/// (message, channel), the worst gain among them (`None` without arrivals).
#[derive(Debug, Clone, PartialEq)]
pub struct SlotDraws {
    pub arrivals: Vec<u64>,
    pub worst_new_gain: Vec<Vec<Option<f64>>>,
}

/// Shifts one request vector by a slot.
///
/// Served messages keep only the new arrivals. Otherwise everything ages by
/// one slot and the two oldest entries merge.
pub fn shift_request_vector(q: &[u64], new_count: u64, multicast: bool) -> Vec<u64> {
    let len = q.len();
    let mut out = vec![0; len];
    if len == 0 {
        return out;
    }
    out[0] = new_count;
    if !multicast && len >= 2 {
        out[1..len - 1].copy_from_slice(&q[..len - 2]);
        out[len - 1] = q[len - 2] + q[len - 1];
    }
    out
}

/// Worst buffered gain after a slot, from the individual gains of the
/// requests that arrived during it.
pub fn update_channel_status(g_old: f64, new_request_gains: &[f64], multicast: bool, max_gain: f64) -> f64 {
    let worst_new = new_request_gains.iter().copied().reduce(f64::min);
    fold_worst_gain(g_old, worst_new, multicast, max_gain)
}

fn fold_worst_gain(g_old: f64, worst_new: Option<f64>, multicast: bool, max_gain: f64) -> f64 {
    match (multicast, worst_new) {
        (true, Some(g)) => g,
        // Nothing buffered after a multicast: back to the initial value.
        (true, None) => max_gain,
        (false, Some(g)) => g_old.min(g),
        (false, None) => g_old,
    }
}

pub fn instant_latency_penalty(request_matrix: &[Vec<u64>], penalty_fn: &[Vec<f64>]) -> f64 {
    request_matrix
        .iter()
        .zip(penalty_fn)
        .map(|(q, p)| q.iter().zip(p).map(|(&c, &w)| c as f64 * w).sum::<f64>())
        .sum()
}

/// Uniform distribution over a finite gain support, with a direct sampler
/// for the minimum of `k` i.i.d. draws.
#[derive(Debug, Clone)]
pub struct GainSampler {
    sorted: Vec<f64>,
}

impl GainSampler {
    pub fn new(support: &[f64]) -> Self {
        let mut sorted = support.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self { sorted }
    }

    pub fn support(&self) -> &[f64] {
        &self.sorted
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.sorted[rng.random_range(0..self.sorted.len())]
    }

    /// Minimum of `k` independent draws, or `None` for `k == 0`.
    ///
    /// Inverts `P(min index >= i) = ((S - i) / S)^k` instead of drawing all
    /// `k` values.
    pub fn sample_min<R: Rng + ?Sized>(&self, rng: &mut R, k: u64) -> Option<f64> {
        if k == 0 {
            return None;
        }
        let s = self.sorted.len();
        let u: f64 = rng.random();
        let mut idx = 0;
        while idx + 1 < s {
            let survive = ((s - idx - 1) as f64 / s as f64).powf(k as f64);
            if u < survive {
                idx += 1;
            } else {
                break;
            }
        }
        Some(self.sorted[idx])
    }

    /// `E[1 / min of k draws]`; `k == 0` yields `1 / max`.
    pub fn expected_inverse_min(&self, k: u64) -> f64 {
        let s = self.sorted.len() as f64;
        if k == 0 {
            return 1.0 / self.sorted[self.sorted.len() - 1];
        }
        self.sorted
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let at_least = ((s - i as f64) / s).powf(k as f64);
                let above = ((s - i as f64 - 1.0) / s).powf(k as f64);
                (at_least - above) / g
            })
            .sum()
    }
}

/// The arrival and gain streams of one environment instance.
#[derive(Debug, Clone)]
pub struct ExogenousRng {
    arrivals: StreamRng,
    gains: StreamRng,
    sampler: GainSampler,
}

impl ExogenousRng {
    pub fn new(config: &EnvConfig) -> Self {
        Self::with_seed(config, config.seed)
    }

    pub fn with_seed(config: &EnvConfig, seed: u64) -> Self {
        Self {
            arrivals: rng::stream(seed, Stream::Arrivals),
            gains: rng::stream(seed, Stream::Gains),
            sampler: GainSampler::new(&config.gain_support),
        }
    }

    pub fn draw(&mut self, config: &EnvConfig) -> SlotDraws {
        let arrivals: Vec<u64> =
            config.arrival_rates.iter().map(|&lambda| rng::poisson(&mut self.arrivals, lambda)).collect();
        let worst_new_gain = arrivals
            .iter()
            .map(|&k| (0..config.n_channels).map(|_| self.sampler.sample_min(&mut self.gains, k)).collect())
            .collect();
        SlotDraws { arrivals, worst_new_gain }
    }
}

/// A configured environment owning its state and random streams.
#[derive(Debug, Clone)]
pub struct Env {
    config: EnvConfig,
    state: EnvState,
    exo: ExogenousRng,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let exo = ExogenousRng::new(&config);
        let state = config.init_state();
        Ok(Self { config, state, exo })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn set_state(&mut self, state: EnvState) {
        self.state = state;
    }

    /// Empties the buffers and frees the channels; random streams continue.
    pub fn reset(&mut self) {
        self.state = self.config.init_state();
    }

    pub fn observe(&self, m: usize) -> Result<AgentObservation> {
        self.config.observe(&self.state, m)
    }

    pub fn step(&mut self, action: &JointAction) -> Result<SlotOutcome> {
        let (next, outcome) = self.config.step(&self.state, action, &mut self.exo)?;
        self.state = next;
        Ok(outcome)
    }

    pub fn step_relaxed(&mut self, action: &JointAction) -> Result<SlotOutcome> {
        let (next, outcome) = self.config.step_relaxed(&self.state, action, &mut self.exo)?;
        self.state = next;
        Ok(outcome)
    }
}
