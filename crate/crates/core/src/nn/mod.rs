//! Score networks `s_theta(x, t)`.
//!
//! Two architectures share one parameter representation: a flat `Vec<f64>`
//! addressed through a [`ParamLayout`]. Gradients are computed by explicit
//! reverse passes over cached activations.

mod checkpoint;
mod conv;
mod embedding;
mod layout;
mod mlp;
mod ops;

use crate::error::{Error, Result};
use crate::sde::SdeSpec;
use crate::tensor::Tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use conv::{ConvConfig, ConvScoreNet};
pub use embedding::{TimeEmbedding, FOURIER_SCALE};
pub use layout::{ParamEntry, ParamLayout};
pub use mlp::{MlpConfig, MlpScoreNet};

/// Activations captured during one forward pass, keyed by layer id in
/// increasing order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureTaps {
    pub layers: Vec<(usize, Tensor)>,
}

impl FeatureTaps {
    pub fn get(&self, layer: usize) -> Option<&Tensor> {
        self.layers.iter().find(|(id, _)| *id == layer).map(|(_, t)| t)
    }

    pub fn ids(&self) -> Vec<usize> {
        self.layers.iter().map(|(id, _)| *id).collect()
    }
}

/// Anything that estimates `grad_x log p_t(x)`.
pub trait ScoreModel: Send + Sync {
    fn score(&self, x: &Tensor, t: f64) -> Result<Tensor>;

    /// Score plus the activations of `layers`. The score equals
    /// [`ScoreModel::score`] bit-for-bit.
    fn score_with_taps(&self, x: &Tensor, t: f64, layers: &[usize]) -> Result<(Tensor, FeatureTaps)>;

    /// Layer ids accepted by [`ScoreModel::score_with_taps`].
    fn tap_layers(&self) -> Vec<usize>;
}

/// Output-only tap for models without hidden layers.
pub const OUTPUT_TAP: usize = 0;

pub(crate) fn output_taps(out: &Tensor, layers: &[usize]) -> Result<FeatureTaps> {
    let mut taps = FeatureTaps::default();
    for &l in layers {
        if l != OUTPUT_TAP {
            return Err(Error::UnknownTap(l));
        }
        taps.layers.push((l, out.clone()));
    }
    Ok(taps)
}

/// Input/output scaling around the raw network.
///
/// With `Sigma`, the raw network sees `x / sqrt(mu^2 + sigma^2)` and its output
/// is divided by `sigma(t)`, so the regression target `-z` has unit scale at
/// every noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Precond {
    None,
    Sigma(SdeSpec),
}

impl Precond {
    pub(crate) fn scales(&self, t: f64) -> Result<(f64, f64)> {
        match self {
            Precond::None => {
                if t > 0.0 && t <= 1.0 {
                    Ok((1.0, 1.0))
                } else {
                    Err(Error::TimeDomain { t, domain: "(0, 1]" })
                }
            }
            Precond::Sigma(spec) => {
                if t < spec.epsilon() * (1.0 - 1e-12) {
                    return Err(Error::TimeDomain {
                        t,
                        domain: "[epsilon, 1]",
                    });
                }
                let (mu, sigma) = spec.marginal_params(t)?;
                Ok((1.0 / (mu * mu + sigma * sigma).sqrt(), 1.0 / sigma))
            }
        }
    }
}

/// A trainable score network of either architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreNet {
    Mlp(MlpScoreNet),
    Conv(ConvScoreNet),
}

impl ScoreNet {
    pub fn params(&self) -> &[f64] {
        match self {
            ScoreNet::Mlp(n) => n.params(),
            ScoreNet::Conv(n) => n.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            ScoreNet::Mlp(n) => n.params_mut(),
            ScoreNet::Conv(n) => n.params_mut(),
        }
    }

    pub fn layout(&self) -> &ParamLayout {
        match self {
            ScoreNet::Mlp(n) => n.layout(),
            ScoreNet::Conv(n) => n.layout(),
        }
    }

    pub fn embedding(&self) -> &TimeEmbedding {
        match self {
            ScoreNet::Mlp(n) => n.embedding(),
            ScoreNet::Conv(n) => n.embedding(),
        }
    }

    /// Shape of a single input sample.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ScoreNet::Mlp(n) => vec![n.config().dim],
            ScoreNet::Conv(n) => {
                let c = n.config();
                vec![c.in_channels, c.height, c.width]
            }
        }
    }

    /// Gradient of `<upstream, s_theta(x, t)>` with respect to the parameters.
    pub fn backward_params(&self, x: &Tensor, t: f64, upstream: &Tensor) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params().len()];
        self.accumulate_grad(x, t, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Adds the parameter gradient of `<upstream, s_theta(x, t)>` into `grad`.
    pub fn accumulate_grad(&self, x: &Tensor, t: f64, upstream: &Tensor, grad: &mut [f64]) -> Result<()> {
        match self {
            ScoreNet::Mlp(n) => n.accumulate_grad(x, t, upstream, grad),
            ScoreNet::Conv(n) => n.accumulate_grad(x, t, upstream, grad),
        }
    }

    /// Forward pass that also returns the parameter gradient of `<u(s), s>` where
    /// the upstream `u` is computed from the output.
    pub fn forward_backward(
        &self,
        x: &Tensor,
        t: f64,
        upstream: impl FnOnce(&Tensor) -> Tensor,
        grad: &mut [f64],
    ) -> Result<Tensor> {
        match self {
            ScoreNet::Mlp(n) => n.forward_backward(x, t, upstream, grad),
            ScoreNet::Conv(n) => n.forward_backward(x, t, upstream, grad),
        }
    }

    pub fn default_taps(&self) -> Vec<usize> {
        self.tap_layers()
    }
}

impl ScoreModel for ScoreNet {
    fn score(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        match self {
            ScoreNet::Mlp(n) => n.score(x, t),
            ScoreNet::Conv(n) => n.score(x, t),
        }
    }

    fn score_with_taps(&self, x: &Tensor, t: f64, layers: &[usize]) -> Result<(Tensor, FeatureTaps)> {
        match self {
            ScoreNet::Mlp(n) => n.score_with_taps(x, t, layers),
            ScoreNet::Conv(n) => n.score_with_taps(x, t, layers),
        }
    }

    fn tap_layers(&self) -> Vec<usize> {
        match self {
            ScoreNet::Mlp(n) => n.tap_layers(),
            ScoreNet::Conv(n) => n.tap_layers(),
        }
    }
}

impl<M: ScoreModel + ?Sized> ScoreModel for &M {
    fn score(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        (**self).score(x, t)
    }
    fn score_with_taps(&self, x: &Tensor, t: f64, layers: &[usize]) -> Result<(Tensor, FeatureTaps)> {
        (**self).score_with_taps(x, t, layers)
    }
    fn tap_layers(&self) -> Vec<usize> {
        (**self).tap_layers()
    }
}

/// Exact mixture score as a model: the analytic whole-score.
#[derive(Debug, Clone)]
pub struct MixtureScore {
    pub mixture: crate::oracle::GaussianMixture,
    pub spec: SdeSpec,
}

impl ScoreModel for MixtureScore {
    fn score(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.mixture.marginal_score(&self.spec, x, t)
    }
    fn score_with_taps(&self, x: &Tensor, t: f64, layers: &[usize]) -> Result<(Tensor, FeatureTaps)> {
        let s = self.score(x, t)?;
        let taps = output_taps(&s, layers)?;
        Ok((s, taps))
    }
    fn tap_layers(&self) -> Vec<usize> {
        vec![OUTPUT_TAP]
    }
}

/// Returns the self-score of a fixed reference sample, `-z / sigma(t)` with
/// `z = (x - mu(t) x0) / sigma(t)`. Plugged in as the "network", the
/// whole-score branch becomes arithmetically identical to the self-score branch.
#[derive(Debug, Clone)]
pub struct SelfScoreStub {
    pub spec: SdeSpec,
    pub x0: Tensor,
}

impl ScoreModel for SelfScoreStub {
    fn score(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.spec.self_score(x, &self.x0, t)
    }
    fn score_with_taps(&self, x: &Tensor, t: f64, layers: &[usize]) -> Result<(Tensor, FeatureTaps)> {
        let s = self.score(x, t)?;
        let taps = output_taps(&s, layers)?;
        Ok((s, taps))
    }
    fn tap_layers(&self) -> Vec<usize> {
        vec![OUTPUT_TAP]
    }
}

/// Returns zero everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroScore;

impl ScoreModel for ZeroScore {
    fn score(&self, x: &Tensor, _t: f64) -> Result<Tensor> {
        Ok(Tensor::zeros(x.shape()))
    }
    fn score_with_taps(&self, x: &Tensor, t: f64, layers: &[usize]) -> Result<(Tensor, FeatureTaps)> {
        let s = self.score(x, t)?;
        let taps = output_taps(&s, layers)?;
        Ok((s, taps))
    }
    fn tap_layers(&self) -> Vec<usize> {
        vec![OUTPUT_TAP]
    }
}

/// Wraps a model and counts forward evaluations.
#[derive(Debug)]
pub struct CountingModel<M> {
    inner: M,
    calls: std::sync::atomic::AtomicU64,
}

impl<M> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            calls: std::sync::atomic::AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }

    pub fn into_inner(self) -> M {
        self.inner
    }
}

impl<M: ScoreModel> ScoreModel for CountingModel<M> {
    fn score(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.score(x, t)
    }
    fn score_with_taps(&self, x: &Tensor, t: f64, layers: &[usize]) -> Result<(Tensor, FeatureTaps)> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.score_with_taps(x, t, layers)
    }
    fn tap_layers(&self) -> Vec<usize> {
        self.inner.tap_layers()
    }
}
