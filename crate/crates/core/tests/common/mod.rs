//! Reference implementations shared by the integration tests and the
//! acceptance suite. Each one is written from the model definition without
//! calling into the library code it checks.
#![allow(dead_code)]

use std::collections::HashMap;

use mcsched::env::{EnvConfig, EnvState, JointAction, SlotDraws};
use rand::Rng;

/// One slot, transcribed index by index from the model equations.
///
/// `new_gains[n][m]` holds the individual gains (on channel `m`) of the
/// requests for message `n` that arrive during the slot, so its length is
/// the arrival count.
pub fn reference_step(
    cfg: &EnvConfig,
    state: &EnvState,
    action: &JointAction,
    new_gains: &[Vec<Vec<f64>>],
) -> (EnvState, f64) {
    let n_msg = cfg.n_messages;
    let n_ch = cfg.n_channels;
    let len = cfg.buffer_len;
    let top_gain = cfg.gain_support.iter().copied().fold(f64::MIN, f64::max);

    let mut energy = 0.0;
    for m in 0..n_ch {
        let a = action.choices[m];
        if a > 0 {
            let n = a - 1;
            energy += f64::from(cfg.duration_table[n][m]) * cfg.energy_const[n][m] / state.channel_status[n][m];
        }
    }
    let mut latency = 0.0;
    for n in 0..n_msg {
        let mut per_message = 0.0;
        for tau in 0..len {
            per_message += state.request_matrix[n][tau] as f64 * cfg.penalty_fn[n][tau];
        }
        latency += per_message;
    }
    let reward = -(cfg.tradeoff_v * energy + latency);

    let mut served = vec![false; n_msg];
    for m in 0..n_ch {
        if action.choices[m] > 0 {
            served[action.choices[m] - 1] = true;
        }
    }

    let mut q = vec![vec![0u64; len]; n_msg];
    for n in 0..n_msg {
        q[n][0] = new_gains[n][0].len() as u64;
        if !served[n] {
            for tau in 1..len - 1 {
                q[n][tau] = state.request_matrix[n][tau - 1];
            }
            q[n][len - 1] = state.request_matrix[n][len - 2] + state.request_matrix[n][len - 1];
        }
    }

    let mut c = vec![0u32; n_ch];
    for m in 0..n_ch {
        c[m] = if state.channel_avail[m] > 0 {
            state.channel_avail[m] - 1
        } else if action.choices[m] > 0 {
            cfg.duration_table[action.choices[m] - 1][m] - 1
        } else {
            0
        };
    }

    let mut g = vec![vec![0.0; n_ch]; n_msg];
    for n in 0..n_msg {
        for m in 0..n_ch {
            let mut worst = if served[n] { top_gain } else { state.channel_status[n][m] };
            if served[n] && !new_gains[n][m].is_empty() {
                worst = f64::INFINITY;
            }
            for &x in &new_gains[n][m] {
                if x < worst {
                    worst = x;
                }
            }
            g[n][m] = worst;
        }
    }

    (EnvState { request_matrix: q, channel_avail: c, channel_status: g, clock: state.clock + 1 }, reward)
}

/// Random configuration with small dimensions and heterogeneous tables.
pub fn random_config(rng: &mut impl Rng) -> EnvConfig {
    let n = rng.random_range(1..=3);
    let m = rng.random_range(1..=3);
    let len = rng.random_range(2..=5);
    EnvConfig {
        n_messages: n,
        n_channels: m,
        buffer_len: len,
        arrival_rates: (0..n).map(|_| rng.random_range(0.2..4.0)).collect(),
        duration_table: (0..n).map(|_| (0..m).map(|_| rng.random_range(1..=5)).collect()).collect(),
        energy_const: (0..n).map(|_| (0..m).map(|_| rng.random_range(100.0..900.0)).collect()).collect(),
        tradeoff_v: rng.random_range(0.0..3.0),
        penalty_fn: (0..n).map(|_| (0..len).map(|_| rng.random_range(0.5..4.0)).collect()).collect(),
        gain_support: (100..=110).map(f64::from).collect(),
        seed: rng.random(),
    }
}

/// Random reachable-looking state: counts, busy timers within the duration
/// range, gains from the support.
pub fn random_state(cfg: &EnvConfig, rng: &mut impl Rng) -> EnvState {
    let max_t = cfg.duration_table.iter().flatten().copied().max().unwrap_or(1);
    EnvState {
        request_matrix: (0..cfg.n_messages)
            .map(|_| (0..cfg.buffer_len).map(|_| rng.random_range(0..6)).collect())
            .collect(),
        channel_avail: (0..cfg.n_channels).map(|_| rng.random_range(0..max_t)).collect(),
        channel_status: (0..cfg.n_messages)
            .map(|_| (0..cfg.n_channels).map(|_| cfg.gain_support[rng.random_range(0..cfg.gain_support.len())]).collect())
            .collect(),
        clock: rng.random_range(1..1000),
    }
}

/// Random action that leaves busy channels idle and never repeats a message.
pub fn random_feasible_action(cfg: &EnvConfig, state: &EnvState, rng: &mut impl Rng) -> JointAction {
    let mut used = vec![false; cfg.n_messages + 1];
    let choices = state
        .channel_avail
        .iter()
        .map(|&c| {
            if c > 0 {
                return 0;
            }
            let a = rng.random_range(0..=cfg.n_messages);
            if a > 0 && used[a] {
                0
            } else {
                used[a] = true;
                a
            }
        })
        .collect();
    JointAction::new(choices)
}

/// Arrival counts and per-request gains for one slot, plus the summary the
/// library transition consumes.
pub fn random_draws(cfg: &EnvConfig, rng: &mut impl Rng) -> (Vec<Vec<Vec<f64>>>, SlotDraws) {
    let mut gains = Vec::new();
    let mut arrivals = Vec::new();
    let mut worst = Vec::new();
    for _ in 0..cfg.n_messages {
        let k = rng.random_range(0..5usize);
        arrivals.push(k as u64);
        let per_channel: Vec<Vec<f64>> = (0..cfg.n_channels)
            .map(|_| (0..k).map(|_| cfg.gain_support[rng.random_range(0..cfg.gain_support.len())]).collect())
            .collect();
        worst.push(per_channel.iter().map(|g: &Vec<f64>| g.iter().copied().reduce(f64::min)).collect());
        gains.push(per_channel);
    }
    (gains, SlotDraws { arrivals, worst_new_gain: worst })
}

/// Independent constraint check: busy channels idle, no message on two
/// channels. Returns the number of broken conditions.
pub fn count_violations(state: &EnvState, action: &JointAction) -> usize {
    let mut bad = 0;
    for (m, &a) in action.choices.iter().enumerate() {
        if a != 0 && state.channel_avail[m] > 0 {
            bad += 1;
        }
    }
    for i in 0..action.choices.len() {
        for j in i + 1..action.choices.len() {
            if action.choices[i] != 0 && action.choices[i] == action.choices[j] {
                bad += 1;
            }
        }
    }
    bad
}

fn permutations(m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(m - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, m - 1);
            out.push(q);
        }
    }
    out
}

/// Exact joint law of the sequential resolver: every agent order is equally
/// likely, and each agent draws from its own policy conditioned on avoiding
/// the messages already taken (idle when nothing is left).
pub fn de_joint_law(policies: &[Vec<f64>]) -> HashMap<Vec<usize>, f64> {
    let m = policies.len();
    let orders = permutations(m);
    let weight = 1.0 / orders.len() as f64;
    let mut law = HashMap::new();
    for order in &orders {
        walk(policies, order, 0, &mut vec![0; m], weight, &mut law);
    }
    law.retain(|_, p| *p > 0.0);
    law
}

fn walk(
    policies: &[Vec<f64>],
    order: &[usize],
    round: usize,
    choices: &mut Vec<usize>,
    prob: f64,
    law: &mut HashMap<Vec<usize>, f64>,
) {
    if round == order.len() {
        *law.entry(choices.clone()).or_insert(0.0) += prob;
        return;
    }
    let agent = order[round];
    let p = &policies[agent];
    let taken: Vec<usize> = order[..round].iter().map(|&a| choices[a]).filter(|&a| a != 0).collect();
    let left = 1.0 - taken.iter().map(|&a| p[a]).sum::<f64>();
    for a in 0..p.len() {
        let cond = if left <= 1e-15 {
            if a == 0 { 1.0 } else { 0.0 }
        } else if taken.contains(&a) {
            0.0
        } else {
            p[a] / left
        };
        if cond > 0.0 {
            choices[agent] = a;
            walk(policies, order, round + 1, choices, prob * cond, law);
        }
    }
    choices[agent] = 0;
}

pub fn total_variation(a: &HashMap<Vec<usize>, f64>, b: &HashMap<Vec<usize>, f64>) -> f64 {
    let mut keys: Vec<&Vec<usize>> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys.iter().map(|k| (a.get(*k).unwrap_or(&0.0) - b.get(*k).unwrap_or(&0.0)).abs()).sum::<f64>()
}

fn poisson_pmf(lambda: f64, k: usize) -> f64 {
    let mut p = (-lambda).exp();
    for i in 1..=k {
        p *= lambda / i as f64;
    }
    p
}

/// `kernel[b][j]`: count goes from `b` to `j` after Poisson arrivals,
/// anything beyond `cap` folded into `cap`.
pub fn capped_arrival_kernel(lambda: f64, cap: usize) -> Vec<Vec<f64>> {
    (0..=cap)
        .map(|b| {
            let mut row = vec![0.0; cap + 1];
            let mut below = 0.0;
            for j in b..cap {
                row[j] = poisson_pmf(lambda, j - b);
                below += row[j];
            }
            row[cap] = 1.0 - below;
            row
        })
        .collect()
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Latency-only two-message, one-channel chain on totals capped at `cap`.
pub struct BruteForceChain {
    pub cap: usize,
    /// `rows[s][a]`: next-state distribution from state `s` under action `a`.
    rows: Vec<[Vec<f64>; 3]>,
    reward: Vec<f64>,
}

impl BruteForceChain {
    pub fn new(lambda: [f64; 2], penalty: [f64; 2], cap: usize) -> Self {
        let size = cap + 1;
        let k1 = capped_arrival_kernel(lambda[0], cap);
        let k2 = capped_arrival_kernel(lambda[1], cap);
        let mut rows = Vec::new();
        let mut reward = Vec::new();
        for q1 in 0..size {
            for q2 in 0..size {
                reward.push(-(penalty[0] * q1 as f64 + penalty[1] * q2 as f64));
                let row_for = |b1: usize, b2: usize| {
                    let mut r = vec![0.0; size * size];
                    for j1 in 0..size {
                        for j2 in 0..size {
                            r[j1 * size + j2] = k1[b1][j1] * k2[b2][j2];
                        }
                    }
                    r
                };
                rows.push([row_for(q1, q2), row_for(0, q2), row_for(q1, 0)]);
            }
        }
        Self { cap, rows, reward }
    }

    pub fn n_states(&self) -> usize {
        self.rows.len()
    }

    /// Long-run average reward of a stationary deterministic policy.
    pub fn gain(&self, policy: &[u8]) -> f64 {
        let n = self.n_states();
        // pi (P - I) = 0 with the last equation replaced by sum(pi) = 1.
        let mut a = vec![vec![0.0; n]; n];
        for (s, &act) in policy.iter().enumerate() {
            for (t, &p) in self.rows[s][act as usize].iter().enumerate() {
                a[t][s] += p;
            }
            a[s][s] -= 1.0;
        }
        a[n - 1] = vec![1.0; n];
        let mut b = vec![0.0; n];
        b[n - 1] = 1.0;
        let pi = solve_dense(a, b);
        pi.iter().zip(&self.reward).map(|(p, r)| p * r).sum()
    }

    /// Actions worth considering in each state: serving an empty message is
    /// the same as idling, so only non-empty messages are offered.
    fn choices(&self, s: usize) -> Vec<u8> {
        let size = self.cap + 1;
        let (q1, q2) = (s / size, s % size);
        let mut c = vec![0];
        if q1 > 0 {
            c.push(1);
        }
        if q2 > 0 {
            c.push(2);
        }
        c
    }

    /// Best gain over every stationary deterministic policy, and one policy
    /// attaining it.
    pub fn optimum(&self) -> (f64, Vec<u8>) {
        let n = self.n_states();
        let choices: Vec<Vec<u8>> = (0..n).map(|s| self.choices(s)).collect();
        let mut digits = vec![0usize; n];
        let mut best = (f64::NEG_INFINITY, Vec::new());
        loop {
            let policy: Vec<u8> = digits.iter().zip(&choices).map(|(&d, c)| c[d]).collect();
            let g = self.gain(&policy);
            if g > best.0 {
                best = (g, policy);
            }
            let mut i = 0;
            loop {
                if i == n {
                    return best;
                }
                digits[i] += 1;
                if digits[i] < choices[i].len() {
                    break;
                }
                digits[i] = 0;
                i += 1;
            }
        }
    }
}
