//! Named random substreams derived from one root seed.
//!
//! Each consumer (placement, shadowing, exploration, ...) asks for its own
//! stream by name and index so adding draws in one place never shifts the
//! numbers another component sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the root seed, the stream name and the index.
pub fn derive_seed(root: u64, name: &str, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for byte in root.to_le_bytes().iter().chain(name.as_bytes()).chain(&index.to_le_bytes()) {
        h ^= *byte as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

pub fn substream(root: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, name, index))
}
