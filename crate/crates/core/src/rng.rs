//! Counter-based deterministic randomness.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by
//! `(seed, domain)` and positioned on stream `index` (usually a trajectory
//! or step number). Items can therefore be processed in any order, on any
//! number of threads, and still see identical random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DOMAIN_MASK: u64 = 1;
pub const DOMAIN_BATCH: u64 = 2;
pub const DOMAIN_INIT: u64 = 3;
pub const DOMAIN_BANK: u64 = 4;
pub const DOMAIN_SYNTH: u64 = 5;
pub const DOMAIN_EVAL: u64 = 6;
pub const DOMAIN_GRADCHECK: u64 = 7;

pub fn item_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
