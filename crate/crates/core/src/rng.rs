//! Counter-based Gaussian increments.
//!
//! Every draw is addressed by `(seed, path, step)`: the ChaCha key comes from
//! the master seed, the ChaCha stream is the path index and the word position
//! is `step * words_per_step`. A step always consumes the same number of words
//! (Box–Muller pairs), so any step of any path can be regenerated in isolation
//! and ensembles are identical under every parallel schedule.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Master key for a family of independent noise paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    seed: u64,
    dim: usize,
}

impl NoiseStream {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// 32-bit ChaCha words consumed per step: two `u64` per normal pair.
    pub fn words_per_step(&self) -> u128 {
        (4 * self.dim.div_ceil(2)) as u128
    }

    pub fn path(&self, path: u64) -> PathNoise {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path);
        PathNoise { rng, dim: self.dim, words_per_step: self.words_per_step(), next_step: 0 }
    }
}

/// Cursor over the increments of a single path.
#[derive(Debug, Clone)]
pub struct PathNoise {
    rng: ChaCha8Rng,
    dim: usize,
    words_per_step: u128,
    next_step: u64,
}

impl PathNoise {
    /// Writes standard normal draws for `step` into `out` (length = noise dim).
    pub fn standard_normals(&mut self, step: u64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        if step != self.next_step {
            self.rng.set_word_pos(step as u128 * self.words_per_step);
        }
        let mut i = 0;
        while i < self.dim {
            let (z0, z1) = box_muller(self.rng.next_u64(), self.rng.next_u64());
            out[i] = z0;
            if i + 1 < self.dim {
                out[i + 1] = z1;
            }
            i += 2;
        }
        self.next_step = step + 1;
    }

    /// Brownian increment `dW ~ N(0, dt I)` for `step`.
    pub fn increment(&mut self, step: u64, dt: f64, out: &mut [f64]) {
        self.standard_normals(step, out);
        let scale = dt.sqrt();
        for v in out.iter_mut() {
            *v *= scale;
        }
    }
}

#[inline]
fn box_muller(a: u64, b: u64) -> (f64, f64) {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    // u1 in (0, 1] keeps the log finite.
    let u1 = 1.0 - (a >> 11) as f64 * SCALE;
    let u2 = (b >> 11) as f64 * SCALE;
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}
