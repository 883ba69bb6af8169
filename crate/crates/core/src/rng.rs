//! Counter-based deterministic random streams.
//!
//! Every random draw in the pipeline comes from a stream keyed by
//! `(global_seed, domain, a, b)`. Identical keys replay the identical
//! sequence; distinct keys give statistically independent streams. This is
//! what makes training, augmentation and dataset generation reproducible
//! regardless of worker scheduling: no draw ever depends on mutable shared
//! RNG state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Purpose tag mixed into the stream key so different uses of the same
/// (seed, index) pair never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Per-sample, per-epoch, per-view augmentation draws.
    Augment,
    /// Parameter initialization, keyed by layer index.
    ParamInit,
    /// Negative-queue initialization, keyed by format index.
    QueueInit,
    /// Per-epoch shuffling of the sample order.
    Shuffle,
    /// Synthetic scene generation, keyed by scene index.
    Scene,
    /// Probe training draws (label shuffles, batch order).
    Probe,
    /// Gradient-check input sampling.
    GradCheck,
    /// Deterministic per-sample resampling outside training (eval feature
    /// extraction).
    Eval,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Augment => 1,
            Domain::ParamInit => 2,
            Domain::QueueInit => 3,
            Domain::Shuffle => 4,
            Domain::Scene => 5,
            Domain::Probe => 6,
            Domain::GradCheck => 7,
            Domain::Eval => 8,
        }
    }
}

/// splitmix64 finalizer; used only to spread key bits into the cipher seed.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A deterministic random stream addressed by key.
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    /// Stream for an arbitrary `(seed, domain, a, b)` key.
    pub fn new(global_seed: u64, domain: Domain, a: u64, b: u64) -> Self {
        let mut state = mix(global_seed);
        state = mix(state ^ mix(domain.tag()));
        state = mix(state ^ mix(a));
        state = mix(state ^ mix(b));
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            state = mix(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        RngStream {
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    /// Stream for one augmented view of one sample in one epoch.
    pub fn for_view(global_seed: u64, sample_index: u64, epoch: u64, view_index: u64) -> Self {
        Self::new(
            global_seed,
            Domain::Augment,
            sample_index,
            epoch.wrapping_mul(2).wrapping_add(view_index),
        )
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform draw in `[lo, hi)`; `lo == hi` returns `lo`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            lo
        } else {
            lo + (hi - lo) * self.uniform()
        }
    }

    /// Uniform index in `0..n`. Panics on `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Bernoulli draw with probability `p`.
    pub fn chance(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal scaled by `std` around `mean`.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        mean + std * z
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    /// Random unit vector of the given dimension (normalized Gaussian).
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.normal(0.0, 1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}
