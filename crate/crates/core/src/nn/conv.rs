use rand_distr::{Distribution, StandardNormal};

use super::embedding::TimeEmbedding;
use super::layout::ParamLayout;
use super::ops::{
    conv2d, conv2d_backward, linear, linear_backward, silu, silu_grad, upsample2, upsample2_backward, ConvGeom,
};
use super::{FeatureTaps, Precond, ScoreModel};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Base channel count `c`; the three resolutions use `c`, `2c`, `4c`.
    pub base_channels: usize,
    pub n_freqs: usize,
    pub fourier_scale: f64,
    pub seed: u64,
    pub precond: Precond,
}

impl ConvConfig {
    pub fn new(in_channels: usize, height: usize, width: usize, base_channels: usize) -> Self {
        Self {
            in_channels,
            height,
            width,
            base_channels,
            n_freqs: 16,
            fourier_scale: super::FOURIER_SCALE,
            seed: 0,
            precond: Precond::None,
        }
    }

    pub fn temb_dim(&self) -> usize {
        4 * self.base_channels
    }
}

/// Decoder taps: 1 = bottleneck at H/4, 2 = decoder at H/2, 3 = decoder at H.
pub const CONV_TAPS: [usize; 3] = [1, 2, 3];

// Block indices into `ConvScoreNet::blocks`.
const ENC1: usize = 0;
const ENC2: usize = 1;
const ENC3: usize = 2;
const MID: usize = 3;
const DEC2: usize = 4;
const DEC1: usize = 5;
const OUT: usize = 6;

#[derive(Debug, Clone, PartialEq)]
struct Block {
    geom: ConvGeom,
    weight: usize,
    bias: usize,
    /// Offsets of the time projection `[c_out, temb]` and its bias, if any.
    temb: Option<(usize, usize)>,
}

/// Small U-shaped score network on `[C, H, W]` images.
///
/// ```text
/// enc1  conv  C  -> c   @ H       ──────────────┐ skip
/// enc2  conv  c  -> 2c  @ H/2 (stride 2) ────┐  │ skip
/// enc3  conv  2c -> 4c  @ H/4 (stride 2)     │  │
/// mid   conv  4c -> 4c  @ H/4        tap 1   │  │
/// dec2  up2, concat enc2, conv -> 2c  tap 2 ─┘  │
/// dec1  up2, concat enc1, conv -> c   tap 3 ────┘
/// out   conv  c  -> C   (linear, zero init)
/// ```
///
/// Every hidden block adds a per-channel projection of the time embedding
/// before its SiLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvScoreNet {
    config: ConvConfig,
    embed: TimeEmbedding,
    layout: ParamLayout,
    params: Vec<f64>,
    blocks: Vec<Block>,
    temb_w: usize,
    temb_b: usize,
}

struct BlockCache {
    cols: Vec<f64>,
    /// Pre-activation, empty for the output block.
    pre: Vec<f64>,
}

struct Cache {
    emb: Vec<f64>,
    temb_pre: Vec<f64>,
    temb: Vec<f64>,
    blocks: Vec<BlockCache>,
    c_out: f64,
}

impl ConvScoreNet {
    pub fn new(config: ConvConfig) -> Result<Self> {
        let mut net = Self::skeleton(config)?;
        let mut r = rng::stream(net.config.seed, &[0xC0]);
        for (name, fan_in) in net.init_plan() {
            let entry = net.layout.get(&name).expect("layout entry").clone();
            let sd = (1.0 / fan_in as f64).sqrt();
            for p in &mut net.params[entry.range()] {
                let n: f64 = StandardNormal.sample(&mut r);
                *p = sd * n;
            }
        }
        Ok(net)
    }

    pub(crate) fn from_parts(config: ConvConfig, embed: TimeEmbedding, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::skeleton(config)?;
        if params.len() != net.params.len() || embed.freqs().len() != net.config.n_freqs {
            return Err(Error::Inconsistent(
                "conv parameter count does not match descriptor".into(),
            ));
        }
        net.params = params;
        net.embed = embed;
        Ok(net)
    }

    fn skeleton(config: ConvConfig) -> Result<Self> {
        let ConvConfig {
            in_channels: ci,
            height: h,
            width: w,
            base_channels: c,
            ..
        } = config;
        if ci == 0 || c == 0 || h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "conv net needs positive channels and H, W divisible by 4, got {ci}x{h}x{w} c={c}"
            )));
        }
        let embed = TimeEmbedding::new(config.n_freqs, config.fourier_scale, config.seed);
        let te = config.temb_dim();
        let mut layout = ParamLayout::default();
        let temb_w = layout.push("temb.weight", &[te, embed.dim()]);
        let temb_b = layout.push("temb.bias", &[te]);
        let geoms = [
            (
                "enc1",
                ConvGeom {
                    c_in: ci,
                    c_out: c,
                    h,
                    w,
                    stride: 1,
                },
            ),
            (
                "enc2",
                ConvGeom {
                    c_in: c,
                    c_out: 2 * c,
                    h,
                    w,
                    stride: 2,
                },
            ),
            (
                "enc3",
                ConvGeom {
                    c_in: 2 * c,
                    c_out: 4 * c,
                    h: h / 2,
                    w: w / 2,
                    stride: 2,
                },
            ),
            (
                "mid",
                ConvGeom {
                    c_in: 4 * c,
                    c_out: 4 * c,
                    h: h / 4,
                    w: w / 4,
                    stride: 1,
                },
            ),
            (
                "dec2",
                ConvGeom {
                    c_in: 6 * c,
                    c_out: 2 * c,
                    h: h / 2,
                    w: w / 2,
                    stride: 1,
                },
            ),
            (
                "dec1",
                ConvGeom {
                    c_in: 3 * c,
                    c_out: c,
                    h,
                    w,
                    stride: 1,
                },
            ),
            (
                "out",
                ConvGeom {
                    c_in: c,
                    c_out: ci,
                    h,
                    w,
                    stride: 1,
                },
            ),
        ];
        let mut blocks = Vec::with_capacity(geoms.len());
        for (i, (name, geom)) in geoms.into_iter().enumerate() {
            let weight = layout.push(format!("{name}.weight"), &[geom.c_out, geom.c_in, 3, 3]);
            let bias = layout.push(format!("{name}.bias"), &[geom.c_out]);
            let temb = (i != OUT).then(|| {
                (
                    layout.push(format!("{name}.temb.weight"), &[geom.c_out, te]),
                    layout.push(format!("{name}.temb.bias"), &[geom.c_out]),
                )
            });
            blocks.push(Block {
                geom,
                weight,
                bias,
                temb,
            });
        }
        let params = vec![0.0; layout.len()];
        Ok(Self {
            config,
            embed,
            layout,
            params,
            blocks,
            temb_w,
            temb_b,
        })
    }

    /// Randomly initialized weight entries with their fan-in. Biases and
    /// the output block stay zero.
    fn init_plan(&self) -> Vec<(String, usize)> {
        let te = self.config.temb_dim();
        let mut plan = vec![("temb.weight".to_string(), self.embed.dim())];
        for name in ["enc1", "enc2", "enc3", "mid", "dec2", "dec1"] {
            let entry = self.layout.get(&format!("{name}.weight")).expect("entry");
            plan.push((format!("{name}.weight"), entry.shape[1] * 9));
            plan.push((format!("{name}.temb.weight"), te));
        }
        plan
    }

    pub fn config(&self) -> &ConvConfig {
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

    fn slice(&self, offset: usize, len: usize) -> &[f64] {
        &self.params[offset..offset + len]
    }

    fn input_shape(&self) -> [usize; 3] {
        [self.config.in_channels, self.config.height, self.config.width]
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape() {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape().to_vec(),
                got: x.shape().to_vec(),
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }

    /// Convolution plus time bias; returns the pre-activation.
    fn block_forward(&self, i: usize, input: &[f64], temb: &[f64], cache: &mut Vec<BlockCache>) -> Vec<f64> {
        let b = &self.blocks[i];
        let g = b.geom;
        let (mut y, cols) = conv2d(
            &g,
            self.slice(b.weight, g.weight_len()),
            self.slice(b.bias, g.c_out),
            input,
        );
        if let Some((tw, tb)) = b.temb {
            let shift = linear(self.slice(tw, g.c_out * temb.len()), self.slice(tb, g.c_out), temb);
            let n = g.out_h() * g.out_w();
            for (co, s) in shift.iter().enumerate() {
                for v in &mut y[co * n..(co + 1) * n] {
                    *v += s;
                }
            }
            cache.push(BlockCache { cols, pre: y.clone() });
            y.iter_mut().for_each(|v| *v = silu(*v));
        } else {
            cache.push(BlockCache { cols, pre: Vec::new() });
        }
        y
    }

    fn run(&self, x: &Tensor, t: f64, mut on_tap: impl FnMut(usize, Tensor)) -> Result<(Tensor, Cache)> {
        self.check_input(x)?;
        let (c_in, c_out) = self.config.precond.scales(t)?;
        let c = self.config.base_channels;
        let (h, w) = (self.config.height, self.config.width);
        let emb = self.embed.embed(t);
        let te = self.config.temb_dim();
        let temb_pre = linear(
            self.slice(self.temb_w, te * emb.len()),
            self.slice(self.temb_b, te),
            &emb,
        );
        let temb: Vec<f64> = temb_pre.iter().map(|&v| silu(v)).collect();

        let mut blocks = Vec::with_capacity(self.blocks.len());
        let input: Vec<f64> = x.data().iter().map(|v| v * c_in).collect();
        let e1 = self.block_forward(ENC1, &input, &temb, &mut blocks);
        let e2 = self.block_forward(ENC2, &e1, &temb, &mut blocks);
        let e3 = self.block_forward(ENC3, &e2, &temb, &mut blocks);
        let m = self.block_forward(MID, &e3, &temb, &mut blocks);
        on_tap(1, Tensor::new(vec![4 * c, h / 4, w / 4], m.clone())?);
        let mut cat = upsample2(&m, 4 * c, h / 4, w / 4);
        cat.extend_from_slice(&e2);
        let d2 = self.block_forward(DEC2, &cat, &temb, &mut blocks);
        on_tap(2, Tensor::new(vec![2 * c, h / 2, w / 2], d2.clone())?);
        let mut cat = upsample2(&d2, 2 * c, h / 2, w / 2);
        cat.extend_from_slice(&e1);
        let d1 = self.block_forward(DEC1, &cat, &temb, &mut blocks);
        on_tap(3, Tensor::new(vec![c, h, w], d1.clone())?);
        let mut out = self.block_forward(OUT, &d1, &temb, &mut blocks);
        out.iter_mut().for_each(|v| *v *= c_out);
        let cache = Cache {
            emb,
            temb_pre,
            temb,
            blocks,
            c_out,
        };
        Ok((Tensor::new(x.shape().to_vec(), out)?, cache))
    }

    /// Reverse of `block_forward` given the gradient w.r.t. the block output
    /// (post-activation). Accumulates into `grad` and `dtemb`.
    fn block_backward(
        &self,
        i: usize,
        cache: &Cache,
        dy_post: Vec<f64>,
        grad: &mut [f64],
        dtemb: &mut [f64],
        want_dx: bool,
    ) -> Option<Vec<f64>> {
        let b = &self.blocks[i];
        let g = b.geom;
        let bc = &cache.blocks[i];
        let dy: Vec<f64> = if bc.pre.is_empty() {
            dy_post
        } else {
            dy_post.iter().zip(&bc.pre).map(|(d, &a)| d * silu_grad(a)).collect()
        };
        if let Some((tw, tb)) = b.temb {
            let n = g.out_h() * g.out_w();
            let dshift: Vec<f64> = dy.chunks_exact(n).map(|c| c.iter().sum()).collect();
            let te = cache.temb.len();
            let (dw, db) = grad[tw..tb + g.c_out].split_at_mut(g.c_out * te);
            let dt =
                linear_backward(self.slice(tw, g.c_out * te), &cache.temb, &dshift, dw, db, true).expect("requested");
            for (a, d) in dtemb.iter_mut().zip(dt) {
                *a += d;
            }
        }
        let (dw, db) = grad[b.weight..b.bias + g.c_out].split_at_mut(g.weight_len());
        conv2d_backward(&g, self.slice(b.weight, g.weight_len()), &bc.cols, &dy, dw, db, want_dx)
    }

    fn backprop(&self, cache: &Cache, upstream: &Tensor, grad: &mut [f64]) -> Result<()> {
        if upstream.shape() != self.input_shape() {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape().to_vec(),
                got: upstream.shape().to_vec(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.params.len()],
                got: vec![grad.len()],
            });
        }
        let c = self.config.base_channels;
        let (h, w) = (self.config.height, self.config.width);
        let mut dtemb = vec![0.0; self.config.temb_dim()];
        let dout: Vec<f64> = upstream.data().iter().map(|u| u * cache.c_out).collect();

        let dd1 = self
            .block_backward(OUT, cache, dout, grad, &mut dtemb, true)
            .expect("dx");
        let dcat1 = self
            .block_backward(DEC1, cache, dd1, grad, &mut dtemb, true)
            .expect("dx");
        let (dup1, de1_skip) = dcat1.split_at(2 * c * h * w);
        let dd2 = upsample2_backward(dup1, 2 * c, h / 2, w / 2);
        let dcat2 = self
            .block_backward(DEC2, cache, dd2, grad, &mut dtemb, true)
            .expect("dx");
        let (dup2, de2_skip) = dcat2.split_at(4 * c * (h / 2) * (w / 2));
        let dm = upsample2_backward(dup2, 4 * c, h / 4, w / 4);
        let de3 = self.block_backward(MID, cache, dm, grad, &mut dtemb, true).expect("dx");
        let mut de2 = self
            .block_backward(ENC3, cache, de3, grad, &mut dtemb, true)
            .expect("dx");
        for (a, b) in de2.iter_mut().zip(de2_skip) {
            *a += b;
        }
        let mut de1 = self
            .block_backward(ENC2, cache, de2, grad, &mut dtemb, true)
            .expect("dx");
        for (a, b) in de1.iter_mut().zip(de1_skip) {
            *a += b;
        }
        self.block_backward(ENC1, cache, de1, grad, &mut dtemb, false);

        let dpre: Vec<f64> = dtemb
            .iter()
            .zip(&cache.temb_pre)
            .map(|(d, &a)| d * silu_grad(a))
            .collect();
        let te = self.config.temb_dim();
        let (dw, db) = grad[self.temb_w..self.temb_b + te].split_at_mut(te * cache.emb.len());
        linear_backward(
            self.slice(self.temb_w, te * cache.emb.len()),
            &cache.emb,
            &dpre,
            dw,
            db,
            false,
        );
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

impl ScoreModel for ConvScoreNet {
    fn score(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        Ok(self.run(x, t, |_, _| {})?.0)
    }

    fn score_with_taps(&self, x: &Tensor, t: f64, layers: &[usize]) -> Result<(Tensor, FeatureTaps)> {
        if let Some(&bad) = layers.iter().find(|l| !CONV_TAPS.contains(l)) {
            return Err(Error::UnknownTap(bad));
        }
        let mut taps = FeatureTaps::default();
        let (out, _) = self.run(x, t, |id, map| {
            if layers.contains(&id) {
                taps.layers.push((id, map));
            }
        })?;
        Ok((out, taps))
    }

    fn tap_layers(&self) -> Vec<usize> {
        CONV_TAPS.to_vec()
    }
}
