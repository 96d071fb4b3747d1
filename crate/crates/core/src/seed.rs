//! Per-item seed derivation.
//!
//! Batch stages never share a random stream between items. Each item gets its
//! own seed from `(master_seed, item_id)`, so results do not depend on the
//! order or the thread an item is processed on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The random stream used throughout the crate.
pub type ItemRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of `(master_seed, id)`.
///
/// FNV-1a over the id bytes, finalized with splitmix64. The value is fixed
/// across platforms and releases, unlike `std::hash`.
pub fn item_seed(master_seed: u64, id: &str) -> u64 {
    let mut h = FNV_OFFSET ^ splitmix64(master_seed);
    for b in id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

/// Random stream for one item.
pub fn item_rng(master_seed: u64, id: &str) -> ItemRng {
    ItemRng::seed_from_u64(item_seed(master_seed, id))
}

pub fn rng_from_seed(seed: u64) -> ItemRng {
    ItemRng::seed_from_u64(seed)
}
