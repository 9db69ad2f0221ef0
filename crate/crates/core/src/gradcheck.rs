//! Central finite-difference checks of the hand-written gradients.

use rand::Rng;

use crate::bound::{dqn_loss, TdSample};
use crate::nn::{Activation, DenseNet, GradientSet, OutputHead};
use crate::ppo::{surrogate_loss, PpoHyper, PreparedBatch};
use crate::rng::{stream, Stream};

const STEP: f64 = 1e-5;

/// Largest relative error between `analytic` and the central difference of
/// `loss` over every parameter of `net`. The denominator is floored at
/// `1e-4` so parameters with vanishing gradient do not blow up the ratio.
pub fn max_relative_error(net: &DenseNet, analytic: &GradientSet, loss: impl Fn(&DenseNet) -> f64) -> f64 {
    let base = net.parameters_flat();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (k, &g) in analytic.to_flat().iter().enumerate() {
        let mut p = base.clone();
        p[k] += STEP;
        probe.set_parameters_flat(&p).expect("same shape");
        let up = loss(&probe);
        p[k] -= 2.0 * STEP;
        probe.set_parameters_flat(&p).expect("same shape");
        let down = loss(&probe);
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max((g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-4));
    }
    worst
}

/// Random batch with every `forced_every`-th record forced and stored
/// probabilities perturbed so some ratios fall outside the clip range.
pub fn random_batch(actor: &DenseNet, critic: &DenseNet, rng: &mut impl Rng, n: usize, forced_every: usize) -> PreparedBatch {
    let obs_features: Vec<Vec<f64>> =
        (0..n).map(|_| (0..actor.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..actor.output_len())).collect();
    let forced: Vec<bool> = (0..n).map(|i| forced_every > 0 && i % forced_every == 0).collect();
    let stored_probs = obs_features
        .iter()
        .zip(&actions)
        .zip(&forced)
        .map(|((o, &a), &f)| {
            if f {
                1.0
            } else {
                let p = actor.predict(o).expect("input sized to the actor")[a];
                (p * rng.random_range(0.6..1.6)).min(1.0)
            }
        })
        .collect();
    let actions = actions.iter().zip(&forced).map(|(&a, &f)| if f { 0 } else { a }).collect();
    PreparedBatch {
        state_features: (0..n).map(|_| (0..critic.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        obs_features,
        actions,
        stored_probs,
        forced,
        returns: (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
        advantages: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
    }
}

/// Worst relative gradient error of the clipped surrogate loss, over both
/// actor and critic parameters, on a small random problem.
pub fn ppo_surrogate_error(seed: u64) -> f64 {
    let mut rng = stream(seed, Stream::MonteCarlo);
    let actor = DenseNet::new(&[5, 6, 4], Activation::Tanh, OutputHead::Softmax, &mut rng).expect("valid sizes");
    let critic = DenseNet::new(&[7, 5, 1], Activation::Tanh, OutputHead::Linear, &mut rng).expect("valid sizes");
    let batch = random_batch(&actor, &critic, &mut rng, 6, 4);
    let hyper = PpoHyper::default();
    let total = |a: &DenseNet, c: &DenseNet| surrogate_loss(a, c, &batch, &hyper).expect("valid batch").0.total;
    let (_, ga, gc) = surrogate_loss(&actor, &critic, &batch, &hyper).expect("valid batch");
    let ea = max_relative_error(&actor, &ga, |a| total(a, &critic));
    let ec = max_relative_error(&critic, &gc, |c| total(&actor, c));
    ea.max(ec)
}

/// Worst relative gradient error of the DQN temporal-difference loss.
pub fn dqn_loss_error(seed: u64) -> f64 {
    let mut rng = stream(seed, Stream::MonteCarlo);
    let net = DenseNet::new(&[5, 7, 2], Activation::Tanh, OutputHead::Linear, &mut rng).expect("valid sizes");
    let batch: Vec<TdSample> = (0..6)
        .map(|_| TdSample {
            features: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
            action: rng.random_range(0..2),
            target: rng.random_range(-2.0..2.0),
        })
        .collect();
    let (_, g) = dqn_loss(&net, &batch).expect("valid batch");
    max_relative_error(&net, &g, |n| dqn_loss(n, &batch).expect("valid batch").0)
}
