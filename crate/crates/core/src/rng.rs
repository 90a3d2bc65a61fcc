//! Named random substreams derived from one experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SotRng = ChaCha8Rng;

/// Independent generator for `name` under `seed` (FNV-1a of the name folded
/// into the seed with a splitmix finalizer).
pub fn substream(seed: u64, name: &str) -> SotRng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}
