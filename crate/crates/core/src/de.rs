//! Distribution embedding: turns one categorical policy per channel into a
//! joint action in which no message is started on two channels.
//!
//! Agents pick in a random order. After each pick of a real message, that
//! message is removed from every agent still waiting and their remaining
//! mass is renormalised over actions.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::env::JointAction;
use crate::error::{Error, Result};

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// Distribution over the `N + 1` agent actions (0 = idle).
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalPolicy {
    probs: Vec<f64>,
}

impl CategoricalPolicy {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("no actions".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidDistribution(format!("entry {p} is not a nonnegative number")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
        }
        Ok(Self { probs })
    }

    /// All mass on `action`.
    pub fn degenerate(n_actions: usize, action: usize) -> Self {
        let mut probs = vec![0.0; n_actions];
        probs[action] = 1.0;
        Self { probs }
    }

    pub fn uniform(n_actions: usize) -> Self {
        Self { probs: vec![1.0 / n_actions as f64; n_actions] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, action: usize) -> f64 {
        self.probs[action]
    }

    pub fn n_actions(&self) -> usize {
        self.probs.len()
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.probs, rng)
    }
}

/// Inverse-CDF draw that never lands on a zero-probability entry.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if p > 0.0 && u < acc {
            return i;
        }
    }
    // Round-off at the top end: fall back to the last supported action.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// The resolved joint action plus, per channel, the probability that
/// channel's own (unmodified) policy gave its chosen action.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedAction {
    pub joint: JointAction,
    pub stored_probs: Vec<f64>,
}

/// Uniformly random permutation of `0..m`.
pub fn random_order<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    order
}

/// Removes `chosen_action` from each remaining policy and renormalises over
/// actions. Idle (`0`) removes nothing. A policy left without mass falls
/// back to idle.
pub fn modify(policies: &[CategoricalPolicy], chosen_action: usize) -> Vec<CategoricalPolicy> {
    let mut raw: Vec<Vec<f64>> = policies.iter().map(|p| p.probs.clone()).collect();
    for p in &mut raw {
        remove_action(p, chosen_action);
    }
    raw.into_iter().map(|probs| CategoricalPolicy { probs }).collect()
}

fn remove_action(probs: &mut [f64], action: usize) {
    if action == 0 || action >= probs.len() {
        return;
    }
    probs[action] = 0.0;
    let mass: f64 = probs.iter().sum();
    if mass > 0.0 {
        probs.iter_mut().for_each(|p| *p /= mass);
    } else {
        probs.iter_mut().for_each(|p| *p = 0.0);
        probs[0] = 1.0;
    }
}

/// Samples a joint action channel by channel in random order, modifying the
/// policies of the channels that have not chosen yet after each pick.
pub fn resolve<R1, R2>(policies: &[CategoricalPolicy], order_rng: &mut R1, sample_rng: &mut R2) -> Result<ResolvedAction>
where
    R1: Rng + ?Sized,
    R2: Rng + ?Sized,
{
    let m = policies.len();
    if m == 0 {
        return Err(Error::InvalidDistribution("no agents".into()));
    }
    let n_actions = policies[0].n_actions();
    for p in policies {
        if p.n_actions() != n_actions {
            return Err(Error::InvalidDistribution("agents disagree on the action count".into()));
        }
        // Re-validate: the fields are private but policies may come from
        // arbitrary arithmetic upstream.
        CategoricalPolicy::new(p.probs.clone())?;
    }
    let order = random_order(m, order_rng);
    let mut working: Vec<Vec<f64>> = policies.iter().map(|p| p.probs.clone()).collect();
    let mut choices = vec![0usize; m];
    for (round, &agent) in order.iter().enumerate() {
        let action = sample_index(&working[agent], sample_rng);
        choices[agent] = action;
        if action != 0 {
            for &later in &order[round + 1..] {
                remove_action(&mut working[later], action);
            }
        }
    }
    let stored_probs = choices.iter().zip(policies).map(|(&a, p)| p.probs[a]).collect();
    Ok(ResolvedAction { joint: JointAction::new(choices), stored_probs })
}

/// Every agent samples its own policy independently. Duplicate messages can
/// occur; this is the unconstrained multi-agent ablation.
pub fn unconstrained_sample<R: Rng + ?Sized>(policies: &[CategoricalPolicy], rng: &mut R) -> ResolvedAction {
    let choices: Vec<usize> = policies.iter().map(|p| p.sample(rng)).collect();
    let stored_probs = choices.iter().zip(policies).map(|(&a, p)| p.probs[a]).collect();
    ResolvedAction { joint: JointAction::new(choices), stored_probs }
}
