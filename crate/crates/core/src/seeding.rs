//! Named, independent random streams derived from a single root seed.
//!
//! Every consumer of randomness (client shuffling, augmentation, client
//! sampling, initialization) gets its own stream keyed by a tag and an index,
//! so adding draws to one stream never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod tags {
    pub const MODEL_INIT: &str = "model-init";
    pub const PROMPT_KAPPA: &str = "prompt-kappa";
    pub const PROMPT_RHO: &str = "prompt-rho";
    pub const QUEUE_INIT: &str = "queue-init";
    pub const SHUFFLE: &str = "shuffle";
    pub const AUGMENT: &str = "augment";
    pub const SAMPLE_CLIENTS: &str = "sample-clients";
    pub const DATA: &str = "data";
    pub const TEST_DATA: &str = "test-data";
    pub const PARTITION: &str = "partition";
    pub const TEST_PARTITION: &str = "test-partition";
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Deterministic 64-bit seed for `(root, tag, index)`.
pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(tag)).wrapping_add(splitmix64(index)))
}

pub fn stream(root: u64, tag: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, tag, index))
}
