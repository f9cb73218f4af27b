//! Seed derivation for reproducible, thread-count-independent randomness.
//!
//! Every stochastic task (one collected trajectory, one training step, one
//! evaluation batch) owns a `ChaCha8Rng` seeded from the master seed and the
//! task's coordinates. Results then depend only on the coordinates, never on
//! scheduling, which is what makes parallel collection deterministic.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams from distinct pipeline phases disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Pretrain,
    Collect,
    TrainStep,
    Eval,
    Sweep,
}

impl StreamKind {
    fn tag(self) -> u64 {
        match self {
            StreamKind::Pretrain => 0x50524554,
            StreamKind::Collect => 0x434f4c4c,
            StreamKind::TrainStep => 0x53544550,
            StreamKind::Eval => 0x4556414c,
            StreamKind::Sweep => 0x53575045,
        }
    }
}

/// SplitMix64 finalizer; good avalanche, cheap, stable across platforms.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mix the master seed with up to three task coordinates into one 64-bit seed.
pub fn derive_seed(master: u64, kind: StreamKind, coords: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ kind.tag());
    for &c in coords {
        h = splitmix64(h ^ c);
    }
    h
}

/// A fresh deterministic generator for the given task coordinates.
pub fn derive_rng(master: u64, kind: StreamKind, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, kind, coords))
}
