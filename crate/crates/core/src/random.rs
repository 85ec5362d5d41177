//! Random streams.
//!
//! Every stochastic operation draws its standard normals through
//! [`NormalSource`], so tests can inject deterministic or zero noise. Runs
//! derive independent substreams from one root seed with [`substream`]:
//! the root seed keys a ChaCha8 generator and the 64-bit stream id is
//! `purpose << 56 | index`, where `index` is usually the iteration number.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Supplier of i.i.d. standard normal variates.
pub trait NormalSource {
    fn fill_standard_normal(&mut self, out: &mut [f64]);
}

impl<R: Rng + ?Sized> NormalSource for R {
    fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.sample(StandardNormal);
        }
    }
}

/// A source that always yields zero, turning every stochastic step into its
/// deterministic counterpart.
#[derive(Debug, Default, Clone, Copy)]
pub struct ZeroNoise;

impl NormalSource for ZeroNoise {
    fn fill_standard_normal(&mut self, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Replays a fixed buffer of normals, wrapping around when exhausted.
#[derive(Debug, Clone)]
pub struct ReplayNoise {
    values: Vec<f64>,
    pos: usize,
}

impl ReplayNoise {
    pub fn new(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "replay buffer must be non-empty");
        Self { values, pos: 0 }
    }
}

impl NormalSource for ReplayNoise {
    fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.values[self.pos];
            self.pos = (self.pos + 1) % self.values.len();
        }
    }
}

/// What a substream is used for. The discriminant is part of the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    SvgdNoise = 2,
    SvnNoise = 3,
    GroundTruth = 4,
}

const INDEX_BITS: u32 = 56;

/// Independent generator for `(seed, purpose, index)`.
pub fn substream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    assert!(index < (1 << INDEX_BITS), "substream index too large");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << INDEX_BITS) | index);
    rng
}
