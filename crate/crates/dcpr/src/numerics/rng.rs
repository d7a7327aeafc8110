//! Deterministic random numbers.
//!
//! A counter-based SplitMix64 generator: trivially seedable, no hidden
//! global state, and the integer stream is identical on every platform.
//! Gaussian draws use the Box-Muller transform (with the spare value
//! cached), so a seed fully determines every training run, noise draw, and
//! shuffle in the library. External RNG crates are deliberately not used on
//! any seeded path.

use super::matrix::{Matrix, Real};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Finalizer from SplitMix64: bijective avalanche mix of a 64-bit word.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream seed for a parallel job.
///
/// Mixes the base seed, a stage tag, and a job index so that regions and
/// devices trained concurrently get decorrelated, order-independent streams.
pub fn derive_seed(base: u64, stage: &str, job: u64) -> u64 {
    let mut h = mix64(base ^ GOLDEN_GAMMA);
    for &b in stage.as_bytes() {
        h = mix64(h ^ (b as u64).wrapping_mul(0x100_0000_01B3));
    }
    mix64(h ^ job.wrapping_mul(GOLDEN_GAMMA))
}

/// Counter-based SplitMix64 generator with Box-Muller Gaussian draws.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed, spare_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]` — safe as a log argument.
    fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is meaningless");
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal draw via Box-Muller; the paired value is cached.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Matrix filled with independent standard normal draws.
    pub fn gaussian_matrix<F: Real>(&mut self, rows: usize, cols: usize) -> Matrix<F> {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = F::from_f64(self.standard_normal());
        }
        m
    }

    /// Matrix of normal draws with the given standard deviation.
    pub fn gaussian_matrix_scaled<F: Real>(&mut self, rows: usize, cols: usize, std: f64) -> Matrix<F> {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = F::from_f64(self.standard_normal() * std);
        }
        m
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
