//! Seeded random streams.
//!
//! Every stochastic source gets its own ChaCha stream derived from the run
//! seed, so switching one source off (or drawing more from it) leaves the
//! others untouched.

use rand::distr::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream identifiers. Values are part of the reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Arrivals = 1,
    Gains = 2,
    DeOrder = 3,
    DeSample = 4,
    NetInit = 5,
    Exploration = 6,
    Replay = 7,
    MonteCarlo = 8,
    Scenario = 9,
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Stream for a numbered sub-entity (e.g. the network of agent `index`).
pub fn sub_stream(seed: u64, which: Stream, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(which as u64);
    rng
}

const INVERSION_CHUNK: f64 = 30.0;

/// Poisson sample by sequential inversion of the CDF.
///
/// Large means are split into independent chunks of mean at most 30, so
/// `exp(-mean)` never underflows.
pub fn poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    debug_assert!(mean >= 0.0);
    if mean <= 0.0 {
        return 0;
    }
    let chunks = (mean / INVERSION_CHUNK).ceil().max(1.0);
    let part = mean / chunks;
    (0..chunks as u64).map(|_| poisson_inversion(rng, part)).sum()
}

fn poisson_inversion<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    let u: f64 = Open01.sample(rng);
    let mut k = 0u64;
    let mut pmf = (-mean).exp();
    let mut cdf = pmf;
    while u > cdf {
        k += 1;
        pmf *= mean / k as f64;
        cdf += pmf;
        // Guards the accumulated round-off in the far tail.
        if pmf < 1e-300 && k as f64 > mean {
            break;
        }
    }
    k
}

/// Poisson probability mass function, evaluated in log space.
pub fn poisson_pmf(mean: f64, k: u64) -> f64 {
    if mean <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    let k_f = k as f64;
    (k_f * mean.ln() - mean - ln_factorial(k)).exp()
}

fn ln_factorial(k: u64) -> f64 {
    (1..=k).map(|i| (i as f64).ln()).sum()
}
