//! One masked PPO agent per channel.
//!
//! The actor sees the agent observation and outputs a distribution over
//! idle plus the `N` messages; a busy channel is forced to idle. The critic
//! sees the whole state. Updates use discounted in-buffer returns, an
//! advantage against the critic frozen at update start, and the clipped
//! surrogate with value and entropy terms.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::de::CategoricalPolicy;
use crate::env::{AgentObservation, EnvConfig};
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, GradientSet, OutputHead};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoHyper {
    /// Experience buffer size (slots per experience-generation phase).
    pub n_buffer: usize,
    /// Gradient iterations per update phase.
    pub n_updates: usize,
    pub discount: f64,
    pub clip: f64,
    pub value_coeff: f64,
    pub entropy_coeff: f64,
    pub learning_rate: f64,
    /// Multiplies rewards before returns are formed; keeps critic targets O(1).
    #[serde(default = "one")]
    pub reward_scale: f64,
    /// Standardise advantages over the non-forced records of a batch.
    #[serde(default = "yes")]
    pub normalize_advantages: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            n_buffer: 1000,
            n_updates: 10,
            discount: 0.9,
            clip: 0.2,
            value_coeff: 0.5,
            entropy_coeff: 0.01,
            learning_rate: 0.001,
            reward_scale: 1.0,
            normalize_advantages: true,
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_buffer == 0 {
            return bad("n_buffer must be positive");
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad("discount must lie in (0, 1)");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if self.value_coeff < 0.0 || self.entropy_coeff < 0.0 || self.learning_rate < 0.0 {
            return bad("coefficients must be nonnegative");
        }
        if !(self.reward_scale.is_finite() && self.reward_scale > 0.0) {
            return bad("reward_scale must be positive");
        }
        Ok(())
    }
}

/// Fixed input scaling of observations and states for the networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub n_messages: usize,
    pub n_channels: usize,
    pub buffer_len: usize,
    pub request_scale: f64,
    pub avail_scale: f64,
    pub gain_scale: f64,
}

impl FeatureScaling {
    pub fn from_config(cfg: &EnvConfig) -> Self {
        let max_rate = cfg.arrival_rates.iter().copied().fold(0.0, f64::max);
        Self {
            n_messages: cfg.n_messages,
            n_channels: cfg.n_channels,
            buffer_len: cfg.buffer_len,
            request_scale: max_rate.max(1.0),
            avail_scale: cfg.max_duration() as f64,
            gain_scale: cfg.max_gain(),
        }
    }

    pub fn observation_features(&self, obs: &AgentObservation) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_messages * self.buffer_len + 1 + self.n_messages);
        out.extend(obs.request_matrix.iter().flatten().map(|&q| q as f64 / self.request_scale));
        out.push(obs.own_avail as f64 / self.avail_scale);
        out.extend(obs.own_gains.iter().map(|g| g / self.gain_scale));
        out
    }

    /// Scales a state flattened by [`crate::env::EnvState::flatten`].
    pub fn state_features(&self, flat_state: &[f64]) -> Vec<f64> {
        let q_len = self.n_messages * self.buffer_len;
        let c_end = q_len + self.n_channels;
        flat_state
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if i < q_len {
                    v / self.request_scale
                } else if i < c_end {
                    v / self.avail_scale
                } else {
                    v / self.gain_scale
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceRecord {
    pub global_state: Vec<f64>,
    pub agent_obs: AgentObservation,
    pub agent_action: usize,
    pub reward: f64,
    pub stored_prob: f64,
}

impl ExperienceRecord {
    /// The action was forced to idle by the busy-channel mask.
    pub fn forced(&self) -> bool {
        self.agent_obs.is_busy()
    }
}

#[derive(Debug, Clone)]
pub struct PpoAgent {
    pub actor: DenseNet,
    pub critic: DenseNet,
    buffer: Vec<ExperienceRecord>,
    capacity: usize,
    scaling: FeatureScaling,
}

/// Summary of one update phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub first_loss: f64,
    pub last_loss: f64,
    pub mean_entropy: f64,
}

impl PpoAgent {
    /// Actor `obs -> hidden.. -> N+1` (softmax), critic `state -> hidden.. -> 1`.
    pub fn new<R: Rng + ?Sized>(
        cfg: &EnvConfig,
        actor_hidden: &[usize],
        critic_hidden: &[usize],
        activation: Activation,
        capacity: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut actor_sizes = vec![cfg.observation_len()];
        actor_sizes.extend_from_slice(actor_hidden);
        actor_sizes.push(cfg.n_messages + 1);
        let mut critic_sizes = vec![cfg.state_len()];
        critic_sizes.extend_from_slice(critic_hidden);
        critic_sizes.push(1);
        Ok(Self {
            actor: DenseNet::new(&actor_sizes, activation, OutputHead::Softmax, rng)?,
            critic: DenseNet::new(&critic_sizes, activation, OutputHead::Linear, rng)?,
            buffer: Vec::with_capacity(capacity),
            capacity,
            scaling: FeatureScaling::from_config(cfg),
        })
    }

    pub fn from_parts(actor: DenseNet, critic: DenseNet, capacity: usize, scaling: FeatureScaling) -> Self {
        Self { actor, critic, buffer: Vec::with_capacity(capacity), capacity, scaling }
    }

    pub fn scaling(&self) -> &FeatureScaling {
        &self.scaling
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn buffer(&self) -> &[ExperienceRecord] {
        &self.buffer
    }

    pub fn n_actions(&self) -> usize {
        self.actor.output_len()
    }

    /// Masked action distribution: busy channels are forced to idle.
    pub fn act_distribution(&self, obs: &AgentObservation) -> Result<CategoricalPolicy> {
        masked_distribution(&self.actor, &self.scaling, obs)
    }

    pub fn store(&mut self, record: ExperienceRecord) -> Result<()> {
        if self.buffer.len() >= self.capacity {
            return Err(Error::CorruptedBuffer(format!("buffer already holds {} records", self.capacity)));
        }
        if !(record.stored_prob > 0.0 && record.stored_prob <= 1.0) {
            return Err(Error::CorruptedBuffer(format!("stored probability {}", record.stored_prob)));
        }
        if !record.reward.is_finite() {
            return Err(Error::CorruptedBuffer("non-finite reward".into()));
        }
        self.buffer.push(record);
        Ok(())
    }

    pub fn clear_buffer(&mut self) {
        self.buffer.clear();
    }

    /// Builds the update batch from the current buffer with the current
    /// critic as the frozen baseline.
    pub fn prepare_batch(&self, hyper: &PpoHyper) -> Result<PreparedBatch> {
        if self.buffer.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let rewards: Vec<f64> = self.buffer.iter().map(|r| r.reward * hyper.reward_scale).collect();
        let returns = compute_returns(&rewards, hyper.discount);
        let state_features: Vec<Vec<f64>> =
            self.buffer.iter().map(|r| self.scaling.state_features(&r.global_state)).collect();
        let baseline = state_features
            .iter()
            .map(|s| Ok(self.critic.predict(s)?[0]))
            .collect::<Result<Vec<f64>>>()?;
        let mut advantages = compute_advantages(&returns, &baseline);
        let forced: Vec<bool> = self.buffer.iter().map(ExperienceRecord::forced).collect();
        if hyper.normalize_advantages {
            normalize_free(&mut advantages, &forced);
        }
        Ok(PreparedBatch {
            obs_features: self.buffer.iter().map(|r| self.scaling.observation_features(&r.agent_obs)).collect(),
            state_features,
            actions: self.buffer.iter().map(|r| r.agent_action).collect(),
            stored_probs: self.buffer.iter().map(|r| r.stored_prob).collect(),
            forced,
            returns,
            advantages,
        })
    }

    /// Full update phase: freeze the baseline, run `n_updates` gradient
    /// steps on the surrogate loss, then empty the buffer.
    pub fn update(&mut self, hyper: &PpoHyper) -> Result<UpdateStats> {
        if self.buffer.len() < self.capacity {
            return Err(Error::PartialBuffer { len: self.buffer.len(), capacity: self.capacity });
        }
        let batch = self.prepare_batch(hyper)?;
        let mut stats = UpdateStats { first_loss: f64::NAN, last_loss: f64::NAN, mean_entropy: f64::NAN };
        for it in 0..hyper.n_updates {
            let (loss, actor_grad, critic_grad) = surrogate_loss(&self.actor, &self.critic, &batch, hyper)?;
            if it == 0 {
                stats.first_loss = loss.total;
            }
            stats.last_loss = loss.total;
            stats.mean_entropy = loss.entropy;
            self.actor.optimizer_step(&actor_grad, hyper.learning_rate)?;
            self.critic.optimizer_step(&critic_grad, hyper.learning_rate)?;
        }
        self.buffer.clear();
        Ok(stats)
    }

    /// Writes `agent_<m>_actor.json` and `agent_<m>_critic.json`.
    pub fn save(&self, dir: &Path, channel: usize) -> Result<()> {
        std::fs::write(dir.join(format!("agent_{channel}_actor.json")), self.actor.save_weights()?)?;
        std::fs::write(dir.join(format!("agent_{channel}_critic.json")), self.critic.save_weights()?)?;
        Ok(())
    }

    pub fn load(dir: &Path, channel: usize, capacity: usize, scaling: FeatureScaling) -> Result<Self> {
        let actor = DenseNet::load_weights(&std::fs::read_to_string(dir.join(format!("agent_{channel}_actor.json")))?)?;
        let critic = DenseNet::load_weights(&std::fs::read_to_string(dir.join(format!("agent_{channel}_critic.json")))?)?;
        Ok(Self::from_parts(actor, critic, capacity, scaling))
    }
}

fn masked_distribution(actor: &DenseNet, scaling: &FeatureScaling, obs: &AgentObservation) -> Result<CategoricalPolicy> {
    if obs.is_busy() {
        return Ok(CategoricalPolicy::degenerate(actor.output_len(), 0));
    }
    CategoricalPolicy::new(actor.predict(&scaling.observation_features(obs))?)
}

fn normalize_free(adv: &mut [f64], forced: &[bool]) {
    let free: Vec<f64> = adv.iter().zip(forced).filter(|(_, &f)| !f).map(|(&a, _)| a).collect();
    if free.len() < 2 {
        return;
    }
    let mean = free.iter().sum::<f64>() / free.len() as f64;
    let var = free.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / free.len() as f64;
    let std = var.sqrt().max(1e-8);
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

/// Discounted sum of the rewards from each position to the end of the
/// buffer, without bootstrapping past it.
pub fn compute_returns(rewards: &[f64], discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, &r) in out.iter_mut().zip(rewards).rev() {
        acc = r + discount * acc;
        *o = acc;
    }
    out
}

pub fn compute_advantage(return_value: f64, critic_value: f64) -> f64 {
    return_value - critic_value
}

pub fn compute_advantages(returns: &[f64], critic_values: &[f64]) -> Vec<f64> {
    returns.iter().zip(critic_values).map(|(&r, &v)| compute_advantage(r, v)).collect()
}

/// Probability ratio of a stored record under `actor`. Forced (masked)
/// records have ratio exactly 1.
pub fn compute_ratio(record: &ExperienceRecord, actor: &DenseNet, scaling: &FeatureScaling, forced: bool) -> Result<f64> {
    if !(record.stored_prob > 0.0) {
        return Err(Error::CorruptedBuffer(format!("stored probability {}", record.stored_prob)));
    }
    if forced {
        return Ok(1.0);
    }
    let pi = masked_distribution(actor, scaling, &record.agent_obs)?;
    Ok(pi.prob(record.agent_action) / record.stored_prob)
}

/// Everything the surrogate loss needs, with returns and advantages fixed.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub obs_features: Vec<Vec<f64>>,
    pub state_features: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub stored_probs: Vec<f64>,
    pub forced: Vec<bool>,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean of `-min(R A, clip(R) A)`.
    pub policy: f64,
    /// Mean of `(V(s) - target)^2`.
    pub value: f64,
    /// Mean entropy of the masked distributions.
    pub entropy: f64,
}

/// Batch-mean surrogate loss and its gradients for the actor and the critic.
pub fn surrogate_loss(
    actor: &DenseNet,
    critic: &DenseNet,
    batch: &PreparedBatch,
    hyper: &PpoHyper,
) -> Result<(LossBreakdown, GradientSet, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let b = batch.len() as f64;
    let (lo, hi) = (1.0 - hyper.clip, 1.0 + hyper.clip);
    let mut actor_grad = GradientSet::zeros_like(actor);
    let mut critic_grad = GradientSet::zeros_like(critic);
    let (mut policy, mut value, mut entropy) = (0.0, 0.0, 0.0);
    let mut out_grad = vec![0.0; actor.output_len()];

    for i in 0..batch.len() {
        let adv = batch.advantages[i];
        if batch.forced[i] {
            // Degenerate distribution: ratio 1, zero entropy, no actor gradient.
            policy -= adv;
        } else {
            let (probs, tape) = actor.forward(&batch.obs_features[i])?;
            let a = batch.actions[i];
            let ratio = probs[a] / batch.stored_probs[i];
            let clipped = ratio.clamp(lo, hi);
            let unclipped_term = ratio * adv;
            let clipped_term = clipped * adv;
            policy -= unclipped_term.min(clipped_term);
            let h: f64 = -probs.iter().map(|p| p * p.ln()).sum::<f64>();
            entropy += h;

            out_grad.iter_mut().for_each(|g| *g = 0.0);
            if unclipped_term <= clipped_term {
                out_grad[a] -= adv / batch.stored_probs[i] / b;
            }
            if hyper.entropy_coeff != 0.0 {
                for (g, p) in out_grad.iter_mut().zip(&probs) {
                    *g += hyper.entropy_coeff * (p.ln() + 1.0) / b;
                }
            }
            actor.backward_into(&tape, &out_grad, &mut actor_grad)?;
        }

        let (v, tape) = critic.forward(&batch.state_features[i])?;
        let err = v[0] - batch.returns[i];
        value += err * err;
        if hyper.value_coeff != 0.0 {
            critic.backward_into(&tape, &[2.0 * hyper.value_coeff * err / b], &mut critic_grad)?;
        }
    }
    let (policy, value, entropy) = (policy / b, value / b, entropy / b);
    let total = policy + hyper.value_coeff * value - hyper.entropy_coeff * entropy;
    Ok((LossBreakdown { total, policy, value, entropy }, actor_grad, critic_grad))
}
