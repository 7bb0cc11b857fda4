//! Counter-based random streams.
//!
//! Every random quantity is drawn from a ChaCha8 stream selected by
//! `(seed, trajectory index, role)`. The seed becomes the cipher key and
//! `(index, role)` the 64-bit stream id, so streams never overlap and a
//! trajectory's draws do not depend on which worker ran it or in what order.
//! Wiener increments additionally use the block counter for random access:
//! cell `k` always reads words `4k..4k+4` of its stream.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u64)]
pub enum StreamRole {
    JumpTimes = 0,
    Wiener = 1,
    FlashNoise = 2,
    FlashPosition = 3,
    /// Free-standing draws used by the statistical harness.
    Auxiliary = 4,
}

/// Identifies one trajectory's family of streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub index: u64,
}

impl StreamKey {
    pub fn new(seed: u64, index: u64) -> Self {
        StreamKey { seed, index }
    }

    pub fn stream(&self, role: StreamRole) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(b"collapse");
        let mut rng = ChaCha8Rng::from_seed(key);
        assert!(self.index < 1 << 60, "trajectory index out of range");
        rng.set_stream((self.index << 3) | role as u64);
        rng
    }
}

/// Uniform draw in the open interval (0, 1).
pub fn open_unit(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal from exactly two 64-bit words (Box–Muller, cosine branch).
pub fn fixed_width_normal(rng: &mut impl RngCore) -> f64 {
    let u1 = open_unit(rng);
    let u2 = open_unit(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn exp1(rng: &mut impl Rng) -> f64 {
    rng.sample(rand_distr::Exp1)
}

pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// A one-dimensional Wiener path sampled on a uniform cell mesh.
///
/// Cell `k` covers `[k·h, (k+1)·h]` with `h = 1/cells_per_unit`; its increment
/// is `√h·N_k` where `N_k` depends only on `(key, k)`. Two paths with the same
/// key and resolution are identical, and coarser increments are formed by
/// summing fine cells, which gives common random numbers across meshes.
#[derive(Debug, Clone)]
pub struct WienerPath {
    key: StreamKey,
    cells_per_unit: f64,
    rng: ChaCha8Rng,
}

impl WienerPath {
    pub fn new(key: StreamKey, cells_per_unit: f64) -> Result<Self> {
        if !(cells_per_unit > 0.0 && cells_per_unit.is_finite()) {
            return Err(invalid("Wiener resolution must be positive"));
        }
        Ok(WienerPath {
            key,
            cells_per_unit,
            rng: key.stream(StreamRole::Wiener),
        })
    }

    pub fn key(&self) -> StreamKey {
        self.key
    }

    pub fn cell_width(&self) -> f64 {
        1.0 / self.cells_per_unit
    }

    pub fn cells_per_unit(&self) -> f64 {
        self.cells_per_unit
    }

    /// Unit normal attached to cell `k`.
    pub fn unit_normal(&mut self, k: u64) -> f64 {
        self.rng.set_word_pos(4 * k as u128);
        fixed_width_normal(&mut self.rng)
    }

    /// `ξ((k+1)h) − ξ(kh)`.
    pub fn cell_increment(&mut self, k: u64) -> f64 {
        self.cell_width().sqrt() * self.unit_normal(k)
    }

    /// Sum of the increments of cells `start..end`.
    pub fn increment(&mut self, start: u64, end: u64) -> f64 {
        let mut s = 0.0;
        self.rng.set_word_pos(4 * start as u128);
        for _ in start..end {
            s += fixed_width_normal(&mut self.rng);
        }
        s * self.cell_width().sqrt()
    }
}
