//! Deterministic, splittable randomness.
//!
//! Every stochastic choice in the crate is keyed by an [`RngState`]: a
//! `(seed, stream)` pair that expands into a counter-based ChaCha8 generator.
//! Identical pairs produce identical draw sequences on every platform, and
//! substreams can be derived without consuming draws, so dataset generation,
//! initialization, episode sampling, and evaluation never share or race a
//! generator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Well-known substream ids so the per-purpose streams never collide.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const EPISODE: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const AUGMENT: u64 = 5;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// A value identifying one deterministic draw sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, stream: 0 }
    }

    /// Derive a child stream. Chaining is order-sensitive, so
    /// `s.substream(a).substream(b)` and `s.substream(b).substream(a)`
    /// yield distinct sequences.
    pub fn substream(self, id: u64) -> Self {
        RngState {
            seed: self.seed,
            stream: splitmix64(self.stream.rotate_left(17) ^ splitmix64(id ^ 0xa076_1d64_78bd_642f)),
        }
    }

    /// Materialize the generator for this state.
    pub fn draws(self) -> Draws {
        let mut key = [0u8; 32];
        let mut x = splitmix64(self.seed ^ 0x243f_6a88_85a3_08d3);
        for chunk in key.chunks_mut(8) {
            x = splitmix64(x);
            chunk.copy_from_slice(&x.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        Draws { rng }
    }
}

/// Draw methods over a materialized generator.
pub struct Draws {
    rng: ChaCha8Rng,
}

impl Draws {
    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn flip(&mut self) -> bool {
        self.rng.gen::<bool>()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(rand_distr::StandardNormal)
    }

    /// Normal truncated to two standard deviations, then scaled by `sigma`.
    pub fn trunc_normal(&mut self, sigma: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * sigma;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    /// `k` distinct indices drawn uniformly from `[0, n)`, in draw order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} distinct items from {n}");
        // Partial Fisher-Yates over an index table.
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}
