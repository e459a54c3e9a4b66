//! Independent per-purpose seed streams derived from one run seed.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Train = 2,
    Eval = 3,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `index` of `stream` under `base`.
pub fn derive_seed(base: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream as u64) ^ index)
}

/// Per-episode seeds of an evaluation run.
pub fn eval_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    (0..episodes as u64)
        .map(|i| derive_seed(seed, Stream::Eval, i))
        .collect()
}
