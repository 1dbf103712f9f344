//! Isotropic Gaussian mixtures with closed-form diffused densities.
//!
//! Under a linear-drift SDE each component `N(m_k, v_k I)` diffuses to
//! `N(mu(t) m_k, (mu(t)^2 v_k + sigma(t)^2) I)`, so `p_t` and its score are
//! exact. This is the ground truth every numerical path is checked against.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::sde::SdeSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<Component>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::InvalidConfig("mixture needs at least one component".into()));
        };
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidConfig("mixture dimension must be >= 1".into()));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!("mixture weights sum to {total}, not 1")));
        }
        for c in &components {
            if !(c.weight > 0.0) || !(c.variance > 0.0) || c.mean.len() != dim {
                return Err(Error::InvalidConfig(format!("invalid mixture component {c:?}")));
            }
        }
        Ok(Self { components, dim })
    }

    /// `1/5 N((-5,-5), I) + 4/5 N((5,5), I)`, the two-dimensional toy distribution.
    pub fn toy() -> Self {
        Self::new(vec![
            Component {
                weight: 0.2,
                mean: vec![-5.0, -5.0],
                variance: 1.0,
            },
            Component {
                weight: 0.8,
                mean: vec![5.0, 5.0],
                variance: 1.0,
            },
        ])
        .expect("valid toy mixture")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Tensor> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = self.components.last().expect("non-empty");
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let sd = chosen.variance.sqrt();
        Tensor::vector(
            chosen
                .mean
                .iter()
                .map(|&m| {
                    let n: f64 = StandardNormal.sample(rng);
                    m + sd * n
                })
                .collect(),
        )
    }

    /// Index of the component mean closest to `x`.
    pub fn nearest_mode(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.components.iter().enumerate() {
            let d2: f64 = c.mean.iter().zip(x).map(|(m, v)| (v - m).powi(2)).sum();
            if d2 < best.1 {
                best = (k, d2);
            }
        }
        best.0
    }

    fn check_point(&self, spec: &SdeSpec, x: &Tensor, t: f64) -> Result<(f64, f64)> {
        if x.len() != self.dim {
            return Err(Error::ShapeMismatch {
                expected: vec![self.dim],
                got: x.shape().to_vec(),
            });
        }
        if t < spec.epsilon() * (1.0 - 1e-12) {
            return Err(Error::TimeDomain {
                t,
                domain: "[epsilon, 1]",
            });
        }
        spec.marginal_params(t)
    }

    /// Per-component log joint terms `log w_k + log N(x; mu m_k, s_k I)` and variances `s_k`.
    fn log_terms(&self, x: &[f64], mu: f64, sigma: f64) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim as f64;
        let mut logs = Vec::with_capacity(self.components.len());
        let mut vars = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let s = mu * mu * c.variance + sigma * sigma;
            let d2: f64 = c.mean.iter().zip(x).map(|(m, v)| (v - mu * m).powi(2)).sum();
            logs.push(c.weight.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * s).ln() - 0.5 * d2 / s);
            vars.push(s);
        }
        (logs, vars)
    }

    /// `log p_t(x)` via log-sum-exp.
    pub fn marginal_log_density(&self, spec: &SdeSpec, x: &Tensor, t: f64) -> Result<f64> {
        let (mu, sigma) = self.check_point(spec, x, t)?;
        let (logs, _) = self.log_terms(x.data(), mu, sigma);
        Ok(log_sum_exp(&logs))
    }

    /// Posterior responsibilities of each component given `x` at time `t`.
    pub fn responsibilities(&self, spec: &SdeSpec, x: &Tensor, t: f64) -> Result<Vec<f64>> {
        let (mu, sigma) = self.check_point(spec, x, t)?;
        let (logs, _) = self.log_terms(x.data(), mu, sigma);
        let lse = log_sum_exp(&logs);
        Ok(logs.iter().map(|l| (l - lse).exp()).collect())
    }

    /// Exact `grad_x log p_t(x)`: responsibility-weighted component scores.
    pub fn marginal_score(&self, spec: &SdeSpec, x: &Tensor, t: f64) -> Result<Tensor> {
        let (mu, sigma) = self.check_point(spec, x, t)?;
        let (logs, vars) = self.log_terms(x.data(), mu, sigma);
        let lse = log_sum_exp(&logs);
        let mut out = vec![0.0; self.dim];
        for ((c, l), s) in self.components.iter().zip(&logs).zip(&vars) {
            let gamma = (l - lse).exp();
            for ((o, m), v) in out.iter_mut().zip(&c.mean).zip(x.data()) {
                *o -= gamma * (v - mu * m) / s;
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
