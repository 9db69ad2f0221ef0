//! Scenario presets S1 to S6.
//!
//! The presets ship as JSON files under `presets/`. Arrival rates (and, for
//! S5, multicast durations) of the large scenarios were drawn once from the
//! scenario seed with [`draw_rates`] / [`draw_durations`] and frozen, so
//! every algorithm sees the same instance.

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::ppo::PpoHyper;
use crate::rng::{self, Stream};
use crate::trainer::{Resolver, TrainConfig};

pub const PRESET_NAMES: [&str; 6] = ["S1", "S2", "S3", "S4", "S5", "S6"];

const FROZEN: [(&str, &str); 6] = [
    ("S1", include_str!("../../../presets/S1.json")),
    ("S2", include_str!("../../../presets/S2.json")),
    ("S3", include_str!("../../../presets/S3.json")),
    ("S4", include_str!("../../../presets/S4.json")),
    ("S5", include_str!("../../../presets/S5.json")),
    ("S6", include_str!("../../../presets/S6.json")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPreset {
    pub name: String,
    pub description: String,
    /// Seed the random parts of the scenario were drawn from, if any.
    pub scenario_seed: Option<u64>,
    pub train: TrainConfig,
    /// Buffer cap for relative value iteration, where it applies.
    pub rvi_cap: Option<usize>,
    /// Default tradeoff sweep.
    pub v_list: Vec<f64>,
    /// Slots used when evaluating a policy.
    pub eval_horizon: usize,
}

impl ScenarioPreset {
    pub fn env(&self) -> &EnvConfig {
        &self.train.env
    }

    pub fn with_v(&self, v: f64) -> Self {
        let mut p = self.clone();
        p.train.env.tradeoff_v = v;
        p
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut p = self.clone();
        p.train.env.seed = seed;
        p
    }

    /// Keeps the first `n` messages and `m` channels.
    pub fn reduced(&self, n: usize, m: usize) -> Result<Self> {
        let env = self.env();
        if n == 0 || m == 0 || n > env.n_messages || m > env.n_channels {
            return Err(Error::Config(format!("cannot reduce {}x{} to {n}x{m}", env.n_messages, env.n_channels)));
        }
        let mut p = self.clone();
        let e = &mut p.train.env;
        e.n_messages = n;
        e.n_channels = m;
        e.arrival_rates.truncate(n);
        e.penalty_fn.truncate(n);
        e.energy_const.truncate(n);
        e.energy_const.iter_mut().for_each(|r| r.truncate(m));
        e.duration_table.truncate(n);
        e.duration_table.iter_mut().for_each(|r| r.truncate(m));
        p.name = format!("{}-{n}x{m}", self.name);
        e.validate()?;
        Ok(p)
    }

    /// Applies a JSON merge patch (objects merge recursively, everything
    /// else replaces) and re-validates.
    pub fn apply_override(&self, patch: &Value) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        merge_patch(&mut doc, patch);
        let p: ScenarioPreset = serde_json::from_value(doc)?;
        p.train.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Recursive JSON merge; `null` in the patch removes the key.
pub fn merge_patch(target: &mut Value, patch: &Value) {
    match (target, patch) {
        (Value::Object(t), Value::Object(p)) => {
            for (k, v) in p {
                if v.is_null() {
                    t.remove(k);
                } else {
                    merge_patch(t.entry(k.clone()).or_insert(Value::Null), v);
                }
            }
        }
        (t, p) => *t = p.clone(),
    }
}

/// Loads a shipped preset by name (case-insensitive).
pub fn preset(name: &str) -> Result<ScenarioPreset> {
    let (_, text) = FROZEN
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::Config(format!("unknown preset '{name}' (known: {})", PRESET_NAMES.join(", "))))?;
    let p: ScenarioPreset = serde_json::from_str(text)?;
    p.train.validate()?;
    Ok(p)
}

/// Integer arrival rates drawn uniformly from `10..=20`.
pub fn draw_rates(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, Stream::Scenario);
    (0..n).map(|_| f64::from(r.random_range(10u32..=20))).collect()
}

/// Durations drawn uniformly from `1..=5`, after the rates of the same seed.
pub fn draw_durations(seed: u64, n: usize, m: usize) -> Vec<Vec<u32>> {
    let mut r = rng::stream(seed, Stream::Scenario);
    for _ in 0..n {
        r.random_range(10u32..=20);
    }
    (0..n).map(|_| (0..m).map(|_| r.random_range(1u32..=5)).collect()).collect()
}

const BUFFER_LEN: usize = 4;
const ENERGY_CONST: f64 = 500.0;

fn base_env(rates: Vec<f64>, m: usize, v: f64) -> EnvConfig {
    let n = rates.len();
    EnvConfig {
        n_messages: n,
        n_channels: m,
        buffer_len: BUFFER_LEN,
        arrival_rates: rates,
        duration_table: vec![vec![1; m]; n],
        energy_const: vec![vec![ENERGY_CONST; m]; n],
        tradeoff_v: v,
        penalty_fn: vec![vec![1.0; BUFFER_LEN]; n],
        gain_support: (100..=110).map(f64::from).collect(),
        seed: 1,
    }
}

fn train_config(env: EnvConfig, hidden: Vec<usize>, episodes: usize) -> TrainConfig {
    TrainConfig {
        env,
        hyper: PpoHyper { reward_scale: 0.1, ..PpoHyper::default() },
        episodes,
        eval_interval: 1000,
        actor_hidden: hidden.clone(),
        critic_hidden: hidden,
        activation: Activation::Tanh,
        resolver: Resolver::DistributionEmbedding,
    }
}

/// Rebuilds a preset from its definition, redrawing the random parts.
/// The shipped JSON files are the output of this function.
pub fn build_preset(name: &str) -> Result<ScenarioPreset> {
    let large_seed = 2024;
    let v_large = vec![0.0, 0.5, 1.0, 2.0, 5.0, 10.0];
    let p = match name.to_ascii_uppercase().as_str() {
        "S1" => ScenarioPreset {
            name: "S1".into(),
            description: "one message, one channel, unit duration and penalty".into(),
            scenario_seed: None,
            train: train_config(base_env(vec![2.0], 1, 1.0), vec![16, 16], 40),
            rvi_cap: None,
            v_list: vec![0.0, 0.25, 0.5, 1.0, 2.0, 5.0],
            eval_horizon: 100_000,
        },
        "S2" => ScenarioPreset {
            name: "S2".into(),
            description: "two messages on one channel, rates (2, 3), latency only".into(),
            scenario_seed: None,
            train: train_config(base_env(vec![2.0, 3.0], 1, 0.0), vec![32, 32], 100),
            rvi_cap: Some(10),
            v_list: vec![0.0, 0.25, 0.5, 1.0, 2.0],
            eval_horizon: 100_000,
        },
        "S3" => ScenarioPreset {
            name: "S3".into(),
            description: "two messages on one channel, rates (2, 7), latency only".into(),
            scenario_seed: None,
            train: train_config(base_env(vec![2.0, 7.0], 1, 0.0), vec![32, 32], 150),
            rvi_cap: Some(15),
            v_list: vec![0.0, 0.25, 0.5, 1.0, 2.0],
            eval_horizon: 100_000,
        },
        "S4" => ScenarioPreset {
            name: "S4".into(),
            description: "ten messages on ten channels, unit durations".into(),
            scenario_seed: Some(large_seed),
            train: train_config(base_env(draw_rates(large_seed, 10), 10, 1.0), vec![128, 128, 128], 200),
            rvi_cap: None,
            v_list: v_large,
            eval_horizon: 20_000,
        },
        "S5" => {
            let seed = large_seed + 1;
            let mut env = base_env(draw_rates(seed, 10), 10, 1.0);
            env.duration_table = draw_durations(seed, 10, 10);
            ScenarioPreset {
                name: "S5".into(),
                description: "ten messages on ten channels, durations 1 to 5 slots".into(),
                scenario_seed: Some(seed),
                train: train_config(env, vec![128, 128, 128], 200),
                rvi_cap: None,
                v_list: v_large,
                eval_horizon: 20_000,
            }
        }
        "S6" => {
            let seed = large_seed + 2;
            let mut env = base_env(draw_rates(seed, 10), 10, 1.0);
            env.penalty_fn = vec![(1..=BUFFER_LEN).map(|t| t as f64).collect(); 10];
            ScenarioPreset {
                name: "S6".into(),
                description: "ten messages on ten channels, penalty equal to the waiting time".into(),
                scenario_seed: Some(seed),
                train: train_config(env, vec![128, 128, 128], 200),
                rvi_cap: None,
                v_list: v_large,
                eval_horizon: 20_000,
            }
        }
        other => return Err(Error::Config(format!("unknown preset '{other}'"))),
    };
    p.train.validate()?;
    Ok(p)
}
