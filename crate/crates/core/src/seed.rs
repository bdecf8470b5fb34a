//! Seed splitting: every random stream is derived from one master seed and a
//! role tag, so modules are reproducible independently of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_SIM_NOISE: &str = "sim-noise";
pub const TAG_PIXEL_SELECT: &str = "pixel-select";
pub const TAG_RENDER_JITTER: &str = "render-jitter";
pub const TAG_RRT: &str = "rrt";

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `SplitMix64(master XOR FNV-1a(tag))`.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    splitmix64(master ^ fnv1a64(tag.as_bytes()))
}

/// Sub-stream `index` of a seed (timestep, pixel, trial…).
pub fn substream(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
