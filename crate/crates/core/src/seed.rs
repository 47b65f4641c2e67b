//! Counter-based seed splitting.
//!
//! Every random stream is keyed by `(master seed, stream name, index)`:
//! the stream name is hashed with 64-bit FNV-1a, combined with the master
//! seed and index, and finalized with SplitMix64. Adding a new stream never
//! shifts the seeds of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(text: &str) -> u64 {
    text.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for item `index` of the named stream under `master`.
pub fn derive(master: u64, stream: &str, index: u64) -> u64 {
    let a = splitmix64(master ^ fnv1a(stream));
    splitmix64(a ^ splitmix64(index.wrapping_add(0x632b_e59b_d9b4_e019)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(master: u64, stream: &str, index: u64) -> ChaCha8Rng {
    rng(derive(master, stream, index))
}
