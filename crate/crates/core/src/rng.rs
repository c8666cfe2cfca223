//! Deterministic randomness.
//!
//! Two kinds of generator are used. Sequential streams (parameter init,
//! shuffling, synthetic data) are ChaCha8 seeded from a master seed plus a
//! domain tag. Per-element draws inside the pruner come from a stateless
//! counter-based generator keyed by `(seed, layer, step, index)`, so each
//! element's draw is independent of evaluation order and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent sub-seeds derived from a single run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Init,
    Feedback,
    Prune,
    Shuffle,
    Data,
    DataVal,
    Subset,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Init => 0x1111,
            Domain::Feedback => 0x2222,
            Domain::Prune => 0x3333,
            Domain::Shuffle => 0x4444,
            Domain::Data => 0x5555,
            Domain::DataVal => 0x6666,
            Domain::Subset => 0x7777,
        }
    }
}

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, domain: Domain) -> u64 {
    mix64(seed ^ mix64(domain.tag()))
}

pub fn stream(seed: u64, domain: Domain) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, domain))
}

/// Source of one uniform `[0, 1)` number per tensor element.
pub trait UniformSource {
    fn uniform(&self, index: usize) -> f64;
}

/// Stateless counter-based generator for one `(seed, layer, step)` triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, layer: usize, step: u64) -> Self {
        let key = mix64(mix64(mix64(seed) ^ layer as u64) ^ step);
        Self { key }
    }

    #[inline]
    pub fn bits(&self, index: usize) -> u64 {
        mix64(self.key ^ mix64(index as u64))
    }
}

impl UniformSource for CounterRng {
    #[inline]
    fn uniform(&self, index: usize) -> f64 {
        (self.bits(index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// The same `r` for every element; handy for pinning one branch of the
/// pruning rule in tests.
#[derive(Clone, Copy, Debug)]
pub struct ConstUniform(pub f64);

impl UniformSource for ConstUniform {
    fn uniform(&self, _index: usize) -> f64 {
        self.0
    }
}
