//! Offline training of the per-channel agents, online application of a
//! trained team, and the evaluation harness shared with the baselines.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bound::CapacityTracker;
use crate::de::{self, CategoricalPolicy, ResolvedAction};
use crate::env::{Env, EnvConfig, EnvState, ExogenousRng, JointAction, SlotOutcome};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::ppo::{ExperienceRecord, PpoAgent, PpoHyper};
use crate::rng::{self, Stream, StreamRng};

/// How the per-channel distributions become a joint action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolver {
    /// Sequential sampling with claimed messages removed.
    #[default]
    DistributionEmbedding,
    /// Independent sampling; duplicates are allowed and charged.
    Unconstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub hyper: PpoHyper,
    pub episodes: usize,
    /// Slots between metric snapshots.
    pub eval_interval: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub resolver: Resolver,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.hyper.validate()?;
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        Ok(())
    }

    /// Slots excluded from the long-run averages at the start of a run.
    pub fn warmup(&self) -> usize {
        self.hyper.n_buffer
    }
}

/// One row of a metric trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    /// Slots elapsed in the run.
    pub slot: u64,
    /// Means per slot since the warm-up ended.
    pub avg_reward: f64,
    pub avg_energy: f64,
    pub avg_latency: f64,
    /// Means over the last snapshot interval.
    pub window_reward: f64,
    pub window_energy: f64,
    pub window_latency: f64,
    /// Multicast starts per slot since the warm-up, row-major (message, channel).
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricTrace {
    pub n_messages: usize,
    pub n_channels: usize,
    pub snapshots: Vec<MetricSnapshot>,
}

impl MetricTrace {
    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn last(&self) -> Option<&MetricSnapshot> {
        self.snapshots.last()
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "slot",
            "avg_reward",
            "avg_energy",
            "avg_latency",
            "window_reward",
            "window_energy",
            "window_latency",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for n in 1..=self.n_messages {
            for m in 1..=self.n_channels {
                h.push(format!("rate_{n}_{m}"));
            }
        }
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(self.header())?;
        for s in &self.snapshots {
            let mut row = vec![
                s.slot.to_string(),
                s.avg_reward.to_string(),
                s.avg_energy.to_string(),
                s.avg_latency.to_string(),
                s.window_reward.to_string(),
                s.window_energy.to_string(),
                s.window_latency.to_string(),
            ];
            row.extend(s.rates.iter().map(f64::to_string));
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct Sums {
    slots: u64,
    reward: f64,
    energy: f64,
    latency: f64,
}

impl Sums {
    fn add(&mut self, o: &SlotOutcome) {
        self.slots += 1;
        self.reward += o.reward;
        self.energy += o.energy;
        self.latency += o.latency;
    }

    fn means(&self) -> (f64, f64, f64) {
        let k = self.slots.max(1) as f64;
        (self.reward / k, self.energy / k, self.latency / k)
    }
}

/// Streaming slot metrics with a warm-up cut and periodic snapshots.
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    tradeoff_v: f64,
    warmup: u64,
    interval: u64,
    slot: u64,
    total: Sums,
    window: Sums,
    starts: Vec<u64>,
    n_channels: usize,
    trace: MetricTrace,
}

impl MetricAccumulator {
    pub fn new(cfg: &EnvConfig, warmup: usize, interval: usize) -> Self {
        Self {
            tradeoff_v: cfg.tradeoff_v,
            warmup: warmup as u64,
            interval: interval.max(1) as u64,
            slot: 0,
            total: Sums::default(),
            window: Sums::default(),
            starts: vec![0; cfg.n_messages * cfg.n_channels],
            n_channels: cfg.n_channels,
            trace: MetricTrace { n_messages: cfg.n_messages, n_channels: cfg.n_channels, snapshots: Vec::new() },
        }
    }

    pub fn record(&mut self, outcome: &SlotOutcome, action: &JointAction) {
        self.slot += 1;
        self.window.add(outcome);
        if self.slot > self.warmup {
            self.total.add(outcome);
            for (m, &a) in action.choices.iter().enumerate() {
                if a > 0 {
                    self.starts[(a - 1) * self.n_channels + m] += 1;
                }
            }
        }
        if self.slot % self.interval == 0 {
            if self.slot > self.warmup {
                self.push_snapshot();
            }
            self.window = Sums::default();
        }
    }

    fn push_snapshot(&mut self) {
        let (avg_reward, avg_energy, avg_latency) = self.total.means();
        let (window_reward, window_energy, window_latency) = self.window.means();
        let k = self.total.slots.max(1) as f64;
        let snap = MetricSnapshot {
            slot: self.slot,
            avg_reward,
            avg_energy,
            avg_latency,
            window_reward,
            window_energy,
            window_latency,
            rates: self.starts.iter().map(|&s| s as f64 / k).collect(),
        };
        let identity = -(self.tradeoff_v * avg_energy + avg_latency);
        assert!(
            (snap.avg_reward - identity).abs() <= 1e-9 * avg_reward.abs().max(1.0),
            "reward decomposition broken at slot {}",
            self.slot
        );
        self.trace.snapshots.push(snap);
    }

    pub fn slots(&self) -> u64 {
        self.slot
    }

    pub fn finish(self) -> MetricTrace {
        self.trace
    }
}

fn resolve_joint(
    resolver: Resolver,
    policies: &[CategoricalPolicy],
    order_rng: &mut StreamRng,
    sample_rng: &mut StreamRng,
) -> Result<ResolvedAction> {
    match resolver {
        Resolver::DistributionEmbedding => de::resolve(policies, order_rng, sample_rng),
        Resolver::Unconstrained => Ok(de::unconstrained_sample(policies, sample_rng)),
    }
}

fn step_with(resolver: Resolver, cfg: &EnvConfig, state: &EnvState, action: &JointAction, exo: &mut ExogenousRng) -> Result<(EnvState, SlotOutcome)> {
    match resolver {
        Resolver::DistributionEmbedding => cfg.step(state, action, exo),
        Resolver::Unconstrained => cfg.step_relaxed(state, action, exo),
    }
}

pub struct TrainOutput {
    pub agents: Vec<PpoAgent>,
    pub trace: MetricTrace,
    /// Mean slot reward of each episode's experience phase.
    pub episode_rewards: Vec<f64>,
}

/// Builds one freshly initialised agent per channel.
pub fn init_agents(config: &TrainConfig) -> Result<Vec<PpoAgent>> {
    (0..config.env.n_channels)
        .map(|m| {
            let mut rng = rng::sub_stream(config.env.seed, Stream::NetInit, m as u64);
            PpoAgent::new(
                &config.env,
                &config.actor_hidden,
                &config.critic_hidden,
                config.activation,
                config.hyper.n_buffer,
                &mut rng,
            )
        })
        .collect()
}

pub fn train(config: &TrainConfig) -> Result<TrainOutput> {
    train_with(config, |_, _| Ok(()))
}

/// Runs the episodes, calling `after_episode(episode, agents)` after every
/// update phase (checkpointing hook).
pub fn train_with<F>(config: &TrainConfig, mut after_episode: F) -> Result<TrainOutput>
where
    F: FnMut(usize, &[PpoAgent]) -> Result<()>,
{
    config.validate()?;
    let cfg = &config.env;
    let mut agents = init_agents(config)?;
    let mut env = Env::new(cfg.clone())?;
    let mut order_rng = rng::stream(cfg.seed, Stream::DeOrder);
    let mut sample_rng = rng::stream(cfg.seed, Stream::DeSample);
    let mut metrics = MetricAccumulator::new(cfg, config.warmup(), config.eval_interval);
    let mut capacity = CapacityTracker::new(cfg.n_channels);
    let mut episode_rewards = Vec::with_capacity(config.episodes);

    for episode in 0..config.episodes {
        env.reset();
        capacity.reset_residual();
        let mut episode_sum = 0.0;
        for _ in 0..config.hyper.n_buffer {
            let state = env.state().clone();
            let observations = (0..cfg.n_channels).map(|m| cfg.observe(&state, m)).collect::<Result<Vec<_>>>()?;
            let policies = agents
                .iter()
                .zip(&observations)
                .map(|(a, o)| a.act_distribution(o))
                .collect::<Result<Vec<_>>>()?;
            let resolved = resolve_joint(config.resolver, &policies, &mut order_rng, &mut sample_rng)?;
            if config.resolver == Resolver::DistributionEmbedding {
                cfg.check_action(&state, &resolved.joint).map_err(Error::Constraint)?;
            }
            let outcome = match config.resolver {
                Resolver::DistributionEmbedding => env.step(&resolved.joint)?,
                Resolver::Unconstrained => env.step_relaxed(&resolved.joint)?,
            };
            capacity.record(cfg, &resolved.joint, &env.state().channel_avail)?;
            metrics.record(&outcome, &resolved.joint);
            episode_sum += outcome.reward;
            let global_state = state.flatten();
            for (m, agent) in agents.iter_mut().enumerate() {
                agent.store(ExperienceRecord {
                    global_state: global_state.clone(),
                    agent_obs: observations[m].clone(),
                    agent_action: resolved.joint.choices[m],
                    reward: outcome.reward,
                    stored_prob: resolved.stored_probs[m],
                })?;
            }
        }
        for agent in &mut agents {
            agent.update(&config.hyper)?;
        }
        episode_rewards.push(episode_sum / config.hyper.n_buffer as f64);
        after_episode(episode, &agents)?;
    }
    Ok(TrainOutput { agents, trace: metrics.finish(), episode_rewards })
}

/// Runs a trained team without storing experience or updating.
pub fn apply_online(
    agents: &[PpoAgent],
    env: &mut Env,
    horizon: usize,
    interval: usize,
    resolver: Resolver,
    seed: u64,
) -> Result<MetricTrace> {
    let mut policy = DeMappoPolicy::new(agents, resolver, seed);
    let cfg = env.config().clone();
    let mut metrics = MetricAccumulator::new(&cfg, 0, interval);
    let mut capacity = CapacityTracker::new(cfg.n_channels);
    for _ in 0..horizon {
        let action = policy.act(&cfg, env.state())?;
        let outcome = if policy.relaxed() { env.step_relaxed(&action)? } else { env.step(&action)? };
        capacity.record(&cfg, &action, &env.state().channel_avail)?;
        metrics.record(&outcome, &action);
    }
    Ok(metrics.finish())
}

/// Anything that maps a state to a joint action.
pub trait SchedulingPolicy {
    fn act(&mut self, cfg: &EnvConfig, state: &EnvState) -> Result<JointAction>;

    /// Evaluate with duplicate-tolerant accounting.
    fn relaxed(&self) -> bool {
        false
    }
}

/// Never multicasts.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdlePolicy;

impl SchedulingPolicy for IdlePolicy {
    fn act(&mut self, cfg: &EnvConfig, _state: &EnvState) -> Result<JointAction> {
        Ok(JointAction::idle(cfg.n_channels))
    }
}

/// A team of trained actors with its resolver and sampling streams.
pub struct DeMappoPolicy<'a> {
    agents: &'a [PpoAgent],
    resolver: Resolver,
    order_rng: StreamRng,
    sample_rng: StreamRng,
}

impl<'a> DeMappoPolicy<'a> {
    pub fn new(agents: &'a [PpoAgent], resolver: Resolver, seed: u64) -> Self {
        Self {
            agents,
            resolver,
            order_rng: rng::stream(seed, Stream::DeOrder),
            sample_rng: rng::stream(seed, Stream::DeSample),
        }
    }
}

impl SchedulingPolicy for DeMappoPolicy<'_> {
    fn act(&mut self, cfg: &EnvConfig, state: &EnvState) -> Result<JointAction> {
        let policies = self
            .agents
            .iter()
            .enumerate()
            .map(|(m, a)| a.act_distribution(&cfg.observe(state, m)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(resolve_joint(self.resolver, &policies, &mut self.order_rng, &mut self.sample_rng)?.joint)
    }

    fn relaxed(&self) -> bool {
        self.resolver == Resolver::Unconstrained
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub avg_reward: f64,
    pub avg_energy: f64,
    pub avg_latency: f64,
    /// Standard error of `avg_reward` from batch means.
    pub reward_stderr: f64,
    /// Multicast starts per slot, row-major (message, channel).
    pub rates: Vec<f64>,
    pub slots: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub horizon: usize,
    pub warmup: usize,
    /// Seed of the exogenous streams used for the evaluation run.
    pub seed: u64,
    pub batches: usize,
}

impl EvalOptions {
    pub fn new(horizon: usize, seed: u64) -> Self {
        Self { horizon, warmup: 1000.min(horizon / 10), seed, batches: 20 }
    }
}

/// Long-run averages of `policy` on a fresh environment.
pub fn evaluate_policy<P: SchedulingPolicy + ?Sized>(policy: &mut P, cfg: &EnvConfig, opts: &EvalOptions) -> Result<EvalResult> {
    cfg.validate()?;
    if opts.horizon == 0 {
        return Err(Error::Config("evaluation horizon must be positive".into()));
    }
    let mut exo = ExogenousRng::with_seed(cfg, opts.seed);
    let mut state = cfg.init_state();
    let mut total = Sums::default();
    let mut starts = vec![0u64; cfg.n_messages * cfg.n_channels];
    let batches = opts.batches.max(2);
    let batch_len = (opts.horizon / batches).max(1);
    let mut batch_means = Vec::with_capacity(batches);
    let mut batch_sum = 0.0;
    let mut in_batch = 0usize;
    for _ in 0..opts.warmup {
        let action = policy.act(cfg, &state)?;
        state = step_policy(policy.relaxed(), cfg, &state, &action, &mut exo)?.0;
    }
    for _ in 0..opts.horizon {
        let action = policy.act(cfg, &state)?;
        let (next, outcome) = step_policy(policy.relaxed(), cfg, &state, &action, &mut exo)?;
        total.add(&outcome);
        for (m, &a) in action.choices.iter().enumerate() {
            if a > 0 {
                starts[(a - 1) * cfg.n_channels + m] += 1;
            }
        }
        batch_sum += outcome.reward;
        in_batch += 1;
        if in_batch == batch_len {
            batch_means.push(batch_sum / batch_len as f64);
            batch_sum = 0.0;
            in_batch = 0;
        }
        state = next;
    }
    let (avg_reward, avg_energy, avg_latency) = total.means();
    Ok(EvalResult {
        avg_reward,
        avg_energy,
        avg_latency,
        reward_stderr: batch_stderr(&batch_means),
        rates: starts.iter().map(|&s| s as f64 / total.slots as f64).collect(),
        slots: total.slots,
    })
}

fn step_policy(relaxed: bool, cfg: &EnvConfig, state: &EnvState, action: &JointAction, exo: &mut ExogenousRng) -> Result<(EnvState, SlotOutcome)> {
    let resolver = if relaxed { Resolver::Unconstrained } else { Resolver::DistributionEmbedding };
    step_with(resolver, cfg, state, action, exo)
}

/// Standard error of the grand mean from equally sized batch means.
pub fn batch_stderr(batch_means: &[f64]) -> f64 {
    let k = batch_means.len();
    if k < 2 {
        return 0.0;
    }
    let mean = batch_means.iter().sum::<f64>() / k as f64;
    let var = batch_means.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    (var / k as f64).sqrt()
}
