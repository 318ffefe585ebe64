use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Portable seedable generator used throughout the crate.  ChaCha output is
/// identical across platforms, which keeps seeded runs bit-reproducible.
pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent generator from a root seed and a path of tags
/// (e.g. `[cell_index, replication_index]`).  Streams for different paths are
/// decorrelated, and the derivation is independent of evaluation order, so
/// parallel consumers can each derive their own stream deterministically.
pub fn derive_rng(seed: u64, tags: &[u64]) -> Rng {
    let mut state = seed ^ 0x6a09_e667_f3bc_c908;
    // Every splitmix call folds the running state forward, so tag order
    // matters and the final key depends on the whole path.
    splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        let mixed = splitmix64(&mut state);
        chunk.copy_from_slice(&mixed.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
