//! Reproducible per-trial random number streams.
//!
//! Every stochastic quantity in a trial draws from a stream derived from
//! `(master_seed, trial_index, role)`. Streams are independent ChaCha
//! nonces, so trials can run in any order (or in parallel) and consume
//! any number of values without perturbing each other.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type TrialRng = ChaCha8Rng;

/// What a stream is used for within one trial. Keeping the trajectory and
/// the two detectors on separate streams means a detector can stop
/// sampling early (adaptive readout) without shifting anything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    Trajectory = 0,
    SpadCounts = 1,
    PmtCounts = 2,
    Aux = 3,
}

const ROLES: u64 = 4;

/// Derive the RNG stream for one `(trial, role)` pair.
pub fn trial_stream(master_seed: u64, trial: u64, role: StreamRole) -> TrialRng {
    assert!(trial < u64::MAX / ROLES, "trial index out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial * ROLES + role as u64);
    rng
}
