//! Seedable random-number streams.
//!
//! Every stochastic routine in this crate draws from a [`ChaCha8Rng`] stream
//! derived from a 64-bit master seed plus integer tags. Particle propagation
//! at level `n` uses the stream `(seed, PROPAGATE, n, i)` for particle `i`,
//! so propagation may run on any number of worker threads and still produce
//! bit-identical output.

use rand_chacha::rand_core::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// Stream domain tags. Distinct domains guarantee that streams derived for
/// different purposes from the same master seed never collide.
pub mod domain {
    /// Per-particle propagation streams, tagged (level, particle).
    pub const PROPAGATE: u64 = 1;
    /// The per-run master stream used for resampling draws.
    pub const RESAMPLE: u64 = 2;
    /// The sequential stream driving one MCMC chain.
    pub const CHAIN: u64 = 3;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha8 stream from `(seed, domain, a, b)`.
///
/// The tags are absorbed through a SplitMix64 mix so that nearby tag values
/// yield unrelated streams.
pub fn stream(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut state = seed;
    for tag in [domain, a, b] {
        state ^= tag.wrapping_mul(0xd6e8_feb8_6659_fd93);
        splitmix64(&mut state);
    }
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// The sequential stream that drives a single MCMC chain.
pub fn chain_stream(seed: u64) -> ChaCha8Rng {
    stream(seed, domain::CHAIN, 0, 0)
}
