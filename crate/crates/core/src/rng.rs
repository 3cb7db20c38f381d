//! Counter-based random streams: every (seed, domain, path) owns an independent ChaCha stream,
//! and each step reads from its own fixed window, so any step of any path can be regenerated
//! without replaying the ones before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Words of keystream reserved for each step of a path.
const WORDS_PER_STEP: u128 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Latent = 1,
    Initial = 2,
    Inventory = 3,
    Evaluation = 4,
}

pub fn stream(seed: u64, domain: Domain, path: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(b"mfgsim\0\0");
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(path);
    rng
}

/// Positions the stream at the window of step `m`.
pub fn seek_step(rng: &mut ChaCha8Rng, m: usize) {
    rng.set_word_pos(m as u128 * WORDS_PER_STEP);
}
