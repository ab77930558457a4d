//! Seeded random streams.
//!
//! Every stochastic step in the crate draws from its own ChaCha stream keyed
//! by `(seed, stream)`, so adding a new consumer never perturbs existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Child seed for the `index`-th sub-run of `seed` (splitmix64 finalizer).
pub fn derive(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Well-separated stream identifiers.
pub(crate) mod streams {
    pub const MIXTURE: u64 = 1;
    pub const SHIFT: u64 = 2;
    pub const OOD: u64 = 3;
    pub const INIT: u64 = 10;
    pub const SHUFFLE: u64 = 11;
    pub const AUGMENT: u64 = 12;
    pub const DROPOUT: u64 = 13;
    pub const ACQUIRE: u64 = 20;
    pub const SUBSET: u64 = 21;
}
