//! Keyed random streams.
//!
//! Every random draw in a run comes from a ChaCha stream whose 256-bit key is
//! `(seed, domain, a, b)`. Streams for different purposes never overlap, and a
//! stream's content does not depend on how many other streams were consumed
//! before it, so results are identical for any worker count or visit order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// What a stream is used for. Part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Domain {
    /// Initial canvas noise `y_T`.
    Init = 1,
    /// Projection planning for one outer step.
    Plan = 2,
    /// Stochastic DDIM noise for one `(t, crop ordinal)`.
    StepNoise = 3,
    /// Training draws.
    Train = 4,
    /// Feature embedding matrices.
    Embed = 5,
    /// k-means initialisation.
    KMeans = 6,
    /// Free-form draws used by tests and tools.
    Aux = 7,
}

/// Build the stream for `(seed, domain, a, b)`.
pub fn stream(seed: u64, domain: Domain, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// `n` standard normal draws.
pub fn normals<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
