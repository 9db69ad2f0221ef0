mod common;

use std::collections::HashMap;

use common::{de_joint_law, total_variation};
use mcsched::de::{resolve, CategoricalPolicy};
use mcsched::rng::{stream, Stream};
use proptest::prelude::*;

fn empirical(policies: &[Vec<f64>], samples: usize, seed: u64) -> HashMap<Vec<usize>, f64> {
    let pols: Vec<CategoricalPolicy> = policies.iter().map(|p| CategoricalPolicy::new(p.clone()).unwrap()).collect();
    let mut order = stream(seed, Stream::DeOrder);
    let mut sample = stream(seed, Stream::DeSample);
    let mut counts: HashMap<Vec<usize>, f64> = HashMap::new();
    for _ in 0..samples {
        let r = resolve(&pols, &mut order, &mut sample).unwrap();
        *counts.entry(r.joint.choices).or_insert(0.0) += 1.0;
    }
    counts.values_mut().for_each(|c| *c /= samples as f64);
    counts
}

#[test]
fn uniform_two_by_two_matches_enumeration() {
    let policies = vec![vec![1.0 / 3.0; 3]; 2];
    let exact = de_joint_law(&policies);
    assert!(exact.keys().all(|k| k[0] == 0 || k[0] != k[1]));
    let tv = total_variation(&exact, &empirical(&policies, 100_000, 1));
    assert!(tv < 0.02, "tv {tv}");
}

#[test]
fn two_agents_split_two_messages_evenly() {
    let policies = vec![vec![0.0, 0.5, 0.5]; 2];
    let exact = de_joint_law(&policies);
    assert_eq!(exact.len(), 2);
    assert!((exact[&vec![1, 2]] - 0.5).abs() < 1e-12);
    let emp = empirical(&policies, 100_000, 2);
    for key in [vec![1, 2], vec![2, 1]] {
        let p = emp.get(&key).copied().unwrap_or(0.0);
        assert!((p - 0.5).abs() < 0.01, "{key:?}: {p}");
    }
    assert_eq!(emp.len(), 2);
}

#[test]
fn exhausted_agent_falls_back_to_idle() {
    // Both agents want message 1 only: whoever goes second must idle.
    let policies = vec![vec![0.0, 1.0], vec![0.0, 1.0]];
    let exact = de_joint_law(&policies);
    assert!((exact[&vec![1, 0]] - 0.5).abs() < 1e-12);
    assert!(total_variation(&exact, &empirical(&policies, 20_000, 3)) < 0.02);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_policies_match_enumeration(seed in any::<u64>()) {
        let mut rng = stream(seed, Stream::MonteCarlo);
        use rand::Rng;
        let m = rng.random_range(2..=3);
        let n = rng.random_range(1..=3);
        let policies: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let raw: Vec<f64> = (0..=n).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|x| x / s).collect()
            })
            .collect();
        let exact = de_joint_law(&policies);
        let total: f64 = exact.values().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        let tv = total_variation(&exact, &empirical(&policies, 20_000, seed));
        prop_assert!(tv < 0.04, "tv {}", tv);
    }
}
