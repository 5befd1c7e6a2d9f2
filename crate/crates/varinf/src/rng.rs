//! Deterministic substream derivation.
//!
//! Every stochastic component draws from a ChaCha12 stream derived from the
//! master seed and a list of integer tags (e.g. `[N, replica, individual]`).
//! Substreams with distinct tag lists are independent for all practical
//! purposes, and the derivation is stable across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed with a tag path into a single 64-bit value (used to
/// derive scalar sub-seeds deterministically).
pub fn mix(master: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix(master);
    for &t in tags {
        acc = splitmix(acc ^ t.wrapping_mul(GOLDEN));
    }
    acc
}

/// Derive a 256-bit seed from a master seed and a tag path.
fn derive_seed(master: u64, tags: &[u64]) -> [u8; 32] {
    let acc = mix(master, tags);
    let mut seed = [0u8; 32];
    let mut z = acc;
    for chunk in seed.chunks_mut(8) {
        z = splitmix(z);
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    seed
}

/// Independent random stream for the given tag path under `master`.
pub fn substream(master: u64, tags: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::from_seed(derive_seed(master, tags))
}
