//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a seed derived from one root seed and a stream label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes.into_iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Child seed for the stream named `label` under `parent`.
pub fn derive(parent: u64, label: &str) -> u64 {
    splitmix64(parent ^ fnv1a(label.bytes()).rotate_left(17))
}

/// Child seed for the `index`-th stream under `parent`.
pub fn derive_indexed(parent: u64, index: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ index.wrapping_mul(0xd134_2543_de82_ef95))
}

/// Child seed keyed by the exact bit pattern of `values`.
pub fn derive_from_values(parent: u64, values: &[f64]) -> u64 {
    splitmix64(parent ^ fnv1a(values.iter().flat_map(|v| v.to_bits().to_le_bytes())))
}

pub fn stream(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
