//! Multi-channel multicast scheduling.
//!
//! * [`env`]: the scheduling process (state, constraints, transitions, reward).
//! * [`nn`]: small dense networks with exact gradients and Adam.
//! * [`ppo`]: per-channel masked PPO agents.
//! * [`de`]: the distribution-embedding resolver that turns per-channel
//!   policies into a joint action without duplicate messages.
//! * [`trainer`]: offline training and online application of DE-MAPPO.
//! * [`baselines`]: round-robin, optimal stopping, relative value iteration
//!   and the unconstrained multi-agent ablation.
//! * [`bound`]: the capacity check and the latency-rate / rate-allocation
//!   performance upper bound.
//! * [`presets`]: the shipped scenario presets.
//! * [`gradcheck`] and [`verify`]: finite-difference checks and quick
//!   self-checks used by the `verify` command.

pub mod error;
pub mod rng;

pub mod env;
pub mod nn;
pub mod de;
pub mod ppo;
pub mod trainer;
pub mod bound;
pub mod baselines;
pub mod presets;
pub mod gradcheck;
pub mod verify;

pub use error::{Error, Result, Violation};
