use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};

use crate::rng;

/// Standard deviation of the random Fourier frequencies.
pub const FOURIER_SCALE: f64 = 16.0;

/// Gaussian random Fourier features of the time variable:
/// `[sin(2 pi f_i t), cos(2 pi f_i t)]` with `f_i ~ N(0, scale^2)` frozen at
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedding {
    freqs: Vec<f64>,
    scale: f64,
    seed: u64,
}

impl TimeEmbedding {
    pub fn new(n_freqs: usize, scale: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[0xE3B]);
        let freqs = (0..n_freqs)
            .map(|_| {
                let n: f64 = StandardNormal.sample(&mut rng);
                n * scale
            })
            .collect();
        Self { freqs, scale, seed }
    }

    pub(crate) fn from_parts(freqs: Vec<f64>, scale: f64, seed: u64) -> Self {
        Self { freqs, scale, seed }
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Output width, twice the number of frequencies.
    pub fn dim(&self) -> usize {
        2 * self.freqs.len()
    }

    pub fn embed(&self, t: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend(self.freqs.iter().map(|f| (2.0 * PI * f * t).sin()));
        out.extend(self.freqs.iter().map(|f| (2.0 * PI * f * t).cos()));
        out
    }
}
