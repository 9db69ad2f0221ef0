mod common;

use common::{random_config, random_draws, random_feasible_action, random_state, reference_step};
use mcsched::env::{Env, ExogenousRng, JointAction};
use mcsched::rng::{stream, Stream};
use proptest::prelude::*;

#[test]
fn transitions_match_reference_exactly() {
    let mut rng = stream(11, Stream::MonteCarlo);
    for case in 0..10_000 {
        let cfg = random_config(&mut rng);
        let state = random_state(&cfg, &mut rng);
        let action = random_feasible_action(&cfg, &state, &mut rng);
        let (gains, draws) = random_draws(&cfg, &mut rng);
        let (expect, reward) = reference_step(&cfg, &state, &action, &gains);
        assert_eq!(cfg.transition(&state, &action, &draws), expect, "case {case}");
        assert_eq!(cfg.outcome(&state, &action).reward, reward, "case {case}");
    }
}

#[test]
fn stepping_through_env_matches_reference_trajectory() {
    let mut rng = stream(12, Stream::MonteCarlo);
    let cfg = random_config(&mut rng);
    let mut env = Env::new(cfg.clone()).unwrap();
    // Mirror of the env's exogenous streams, consumed in the same order.
    let mut exo = ExogenousRng::new(&cfg);
    for _ in 0..2000 {
        let before = env.state().clone();
        let action = random_feasible_action(&cfg, &before, &mut rng);
        let out = env.step(&action).unwrap();
        let draws = exo.draw(&cfg);
        assert_eq!(env.state(), &cfg.transition(&before, &action, &draws));
        assert_eq!(out.reward, cfg.outcome(&before, &action).reward);
    }
}

#[test]
fn infeasible_actions_are_rejected_not_repaired() {
    let mut rng = stream(13, Stream::MonteCarlo);
    let mut cfg = random_config(&mut rng);
    cfg.n_channels = 2;
    cfg.n_messages = 2;
    cfg.arrival_rates.resize(2, 1.0);
    cfg.penalty_fn.resize(2, vec![1.0; cfg.buffer_len]);
    cfg.duration_table = vec![vec![3; 2]; 2];
    cfg.energy_const = vec![vec![500.0; 2]; 2];
    let mut env = Env::new(cfg).unwrap();
    let before = env.state().clone();
    let err = env.step(&JointAction::new(vec![1, 1])).unwrap_err();
    assert_eq!(err.kind(), "constraint_violation");
    assert_eq!(env.state(), &before);
    env.step(&JointAction::new(vec![1, 0])).unwrap();
    assert_eq!(env.step(&JointAction::new(vec![2, 0])).unwrap_err().kind(), "constraint_violation");
}

proptest! {
    #[test]
    fn request_mass_is_conserved(seed in any::<u64>()) {
        let mut rng = stream(seed, Stream::MonteCarlo);
        let cfg = random_config(&mut rng);
        let state = random_state(&cfg, &mut rng);
        let action = random_feasible_action(&cfg, &state, &mut rng);
        let (_, draws) = random_draws(&cfg, &mut rng);
        let next = cfg.transition(&state, &action, &draws);
        for n in 0..cfg.n_messages {
            let served = action.choices.contains(&(n + 1));
            let before: u64 = state.request_matrix[n].iter().sum();
            let after: u64 = next.request_matrix[n].iter().sum();
            let carried = if served { 0 } else { before };
            prop_assert_eq!(after, carried + draws.arrivals[n]);
        }
    }

    #[test]
    fn busy_timers_stay_within_duration(seed in any::<u64>()) {
        let mut rng = stream(seed, Stream::MonteCarlo);
        let cfg = random_config(&mut rng);
        let state = random_state(&cfg, &mut rng);
        let action = random_feasible_action(&cfg, &state, &mut rng);
        let (_, draws) = random_draws(&cfg, &mut rng);
        let next = cfg.transition(&state, &action, &draws);
        let max_t = cfg.max_duration();
        for (m, &c) in next.channel_avail.iter().enumerate() {
            prop_assert!(c < max_t);
            if state.channel_avail[m] > 0 {
                prop_assert_eq!(c, state.channel_avail[m] - 1);
            }
        }
    }

    #[test]
    fn worst_gain_never_exceeds_support(seed in any::<u64>()) {
        let mut rng = stream(seed, Stream::MonteCarlo);
        let cfg = random_config(&mut rng);
        let state = random_state(&cfg, &mut rng);
        let action = random_feasible_action(&cfg, &state, &mut rng);
        let (_, draws) = random_draws(&cfg, &mut rng);
        let next = cfg.transition(&state, &action, &draws);
        for g in next.channel_status.iter().flatten() {
            prop_assert!(cfg.gain_support.contains(g));
        }
    }

    #[test]
    fn reward_is_never_positive(seed in any::<u64>()) {
        let mut rng = stream(seed, Stream::MonteCarlo);
        let cfg = random_config(&mut rng);
        let state = random_state(&cfg, &mut rng);
        let action = random_feasible_action(&cfg, &state, &mut rng);
        let o = cfg.outcome(&state, &action);
        prop_assert!(o.reward <= 0.0);
        prop_assert!((o.reward + cfg.tradeoff_v * o.energy + o.latency).abs() < 1e-9);
    }
}
