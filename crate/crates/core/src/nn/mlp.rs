use rand_distr::{Distribution, StandardNormal};

use super::embedding::TimeEmbedding;
use super::layout::ParamLayout;
use super::ops::{linear, linear_backward, silu, silu_grad};
use super::{FeatureTaps, Precond, ScoreModel};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub dim: usize,
    pub hidden: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub n_freqs: usize,
    pub fourier_scale: f64,
    pub seed: u64,
    pub precond: Precond,
}

impl MlpConfig {
    pub fn new(dim: usize, hidden: usize) -> Self {
        Self {
            dim,
            hidden,
            depth: 2,
            n_freqs: 16,
            fourier_scale: super::FOURIER_SCALE,
            seed: 0,
            precond: Precond::None,
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.dim + 2 * self.n_freqs];
        w.extend(std::iter::repeat_n(self.hidden, self.depth));
        w.push(self.dim);
        w
    }
}

/// Time-conditioned MLP: `[x; emb(t)] -> h -> ... -> h -> d` with SiLU on the
/// hidden layers and a linear output. Hidden layer `i` (1-based) is tap `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpScoreNet {
    config: MlpConfig,
    embed: TimeEmbedding,
    layout: ParamLayout,
    params: Vec<f64>,
}

struct Cache {
    /// Input to each linear layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
    c_out: f64,
}

impl MlpScoreNet {
    /// Hidden layers get `N(0, 1/fan_in)` weights; the output layer starts at zero.
    pub fn new(config: MlpConfig) -> Result<Self> {
        if config.dim == 0 || config.hidden == 0 || config.depth == 0 {
            return Err(Error::InvalidConfig("mlp dims must be positive".into()));
        }
        let embed = TimeEmbedding::new(config.n_freqs, config.fourier_scale, config.seed);
        let layout = Self::build_layout(&config);
        let mut params = vec![0.0; layout.len()];
        let mut r = rng::stream(config.seed, &[0x1417]);
        let widths = config.widths();
        for (i, pair) in widths.windows(2).enumerate() {
            if i + 2 == widths.len() {
                break;
            }
            let entry = layout.get(&format!("l{i}.weight")).expect("layout entry");
            let sd = (1.0 / pair[0] as f64).sqrt();
            for p in &mut params[entry.range()] {
                let n: f64 = StandardNormal.sample(&mut r);
                *p = sd * n;
            }
        }
        Ok(Self {
            config,
            embed,
            layout,
            params,
        })
    }

    pub(crate) fn from_parts(config: MlpConfig, embed: TimeEmbedding, params: Vec<f64>) -> Result<Self> {
        let layout = Self::build_layout(&config);
        if params.len() != layout.len() || embed.freqs().len() != config.n_freqs {
            return Err(Error::Inconsistent(
                "mlp parameter count does not match descriptor".into(),
            ));
        }
        Ok(Self {
            config,
            embed,
            layout,
            params,
        })
    }

    fn build_layout(config: &MlpConfig) -> ParamLayout {
        let mut layout = ParamLayout::default();
        for (i, pair) in config.widths().windows(2).enumerate() {
            layout.push(format!("l{i}.weight"), &[pair[1], pair[0]]);
            layout.push(format!("l{i}.bias"), &[pair[1]]);
        }
        layout
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn embedding(&self) -> &TimeEmbedding {
        &self.embed
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn n_layers(&self) -> usize {
        self.config.depth + 1
    }

    fn weights(&self, i: usize) -> (&[f64], &[f64]) {
        let w = &self.layout.entries()[2 * i];
        let b = &self.layout.entries()[2 * i + 1];
        (&self.params[w.range()], &self.params[b.range()])
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.len() != self.config.dim {
            return Err(Error::ShapeMismatch {
                expected: vec![self.config.dim],
                got: x.shape().to_vec(),
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }

    fn run(&self, x: &Tensor, t: f64, mut on_hidden: impl FnMut(usize, &[f64])) -> Result<(Tensor, Cache)> {
        self.check_input(x)?;
        let (c_in, c_out) = self.config.precond.scales(t)?;
        let mut h: Vec<f64> = x.data().iter().map(|v| v * c_in).collect();
        h.extend(self.embed.embed(t));
        let mut cache = Cache {
            inputs: Vec::with_capacity(self.n_layers()),
            pre: Vec::with_capacity(self.config.depth),
            c_out,
        };
        for i in 0..self.n_layers() {
            let (w, b) = self.weights(i);
            let a = linear(w, b, &h);
            cache.inputs.push(std::mem::take(&mut h));
            if i + 1 < self.n_layers() {
                h = a.iter().map(|&v| silu(v)).collect();
                on_hidden(i + 1, &h);
                cache.pre.push(a);
            } else {
                h = a.iter().map(|v| v * c_out).collect();
            }
        }
        let out = Tensor::new(x.shape().to_vec(), h)?;
        Ok((out, cache))
    }

    fn backprop(&self, cache: &Cache, upstream: &Tensor, grad: &mut [f64]) -> Result<()> {
        if upstream.len() != self.config.dim {
            return Err(Error::ShapeMismatch {
                expected: vec![self.config.dim],
                got: upstream.shape().to_vec(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.params.len()],
                got: vec![grad.len()],
            });
        }
        let mut dy: Vec<f64> = upstream.data().iter().map(|u| u * cache.c_out).collect();
        for i in (0..self.n_layers()).rev() {
            let (w, _) = self.weights(i);
            let we = &self.layout.entries()[2 * i];
            let be = &self.layout.entries()[2 * i + 1];
            // Weight and bias entries are adjacent in the flat vector.
            let (dw, db) = grad[we.offset..be.offset + be.len()].split_at_mut(we.len());
            let dx = linear_backward(w, &cache.inputs[i], &dy, dw, db, i > 0);
            if let Some(dx) = dx {
                dy = dx
                    .iter()
                    .zip(&cache.pre[i - 1])
                    .map(|(g, &a)| g * silu_grad(a))
                    .collect();
            }
        }
        Ok(())
    }

    pub fn accumulate_grad(&self, x: &Tensor, t: f64, upstream: &Tensor, grad: &mut [f64]) -> Result<()> {
        let (_, cache) = self.run(x, t, |_, _| {})?;
        self.backprop(&cache, upstream, grad)
    }

    pub fn forward_backward(
        &self,
        x: &Tensor,
        t: f64,
        upstream: impl FnOnce(&Tensor) -> Tensor,
        grad: &mut [f64],
    ) -> Result<Tensor> {
        let (out, cache) = self.run(x, t, |_, _| {})?;
        let u = upstream(&out);
        self.backprop(&cache, &u, grad)?;
        Ok(out)
    }
}

impl ScoreModel for MlpScoreNet {
    fn score(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        Ok(self.run(x, t, |_, _| {})?.0)
    }

    fn score_with_taps(&self, x: &Tensor, t: f64, layers: &[usize]) -> Result<(Tensor, FeatureTaps)> {
        let mut sorted = layers.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if let Some(&bad) = sorted.iter().find(|&&l| l == 0 || l > self.config.depth) {
            return Err(Error::UnknownTap(bad));
        }
        let mut taps = FeatureTaps::default();
        let (out, _) = self.run(x, t, |id, h| {
            if sorted.contains(&id) {
                taps.layers.push((id, Tensor::vector(h.to_vec())));
            }
        })?;
        Ok((out, taps))
    }

    fn tap_layers(&self) -> Vec<usize> {
        (1..=self.config.depth).collect()
    }
}
