//! Named, independently seeded random streams.
//!
//! Every stochastic component of the pipeline draws from its own stream,
//! derived from the experiment's master seed and a stream name (plus an
//! optional numeric qualifier for per-cohort or per-question streams).
//! Derivation hashes the seed and name together, so streams are mutually
//! independent and adding draws to one stream never perturbs another —
//! e.g. reseeding only the survey stream must leave every scheduling
//! artifact byte-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream names used by the pipeline. Centralised so typos can't silently
/// fork a stream.
pub mod stream_names {
    pub const POPULATION: &str = "population";
    pub const ASSIGNMENT: &str = "assignment";
    pub const PICKUP: &str = "pickup";
    pub const LISTEN: &str = "listen";
    pub const SURVEY: &str = "survey";
    pub const ANALYSIS: &str = "analysis";
}

/// Derive the RNG for a named stream from the master seed.
pub fn stream(master_seed: u64, name: &str) -> ChaCha8Rng {
    substream(master_seed, name, 0)
}

/// Derive the RNG for a qualified stream, e.g. one per cohort or per
/// question under the same name.
pub fn substream(master_seed: u64, name: &str, qualifier: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(name.as_bytes());
    hasher.update([0x1f]);
    hasher.update(qualifier.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
