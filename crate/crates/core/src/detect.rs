//! Anomaly maps from coupled whole-score / self-score trajectories.
//!
//! For each start time in the scale set the two branches run `r` steps;
//! the model is then evaluated on both end states and the discrepancy
//! between them (tapped features, scores, or the states themselves) forms a
//! per-scale map. Maps are summed across scales per layer, upsampled to the
//! input resolution and multiplied across layers.

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::integrator::{run_pair, Mode, TrajectoryPair};
use crate::nn::{FeatureTaps, ScoreModel};
use crate::rng;
use crate::sde::SdeSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    /// Distances between tapped features, product over layers.
    FeatureProduct,
    /// Squared difference of the model scores on the two end states.
    ScoreDiff,
    /// Squared difference of the end states themselves.
    ReconLoss,
}

impl std::str::FromStr for Combine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature_product" => Ok(Combine::FeatureProduct),
            "score_diff" => Ok(Combine::ScoreDiff),
            "recon_loss" => Ok(Combine::ReconLoss),
            other => Err(Error::InvalidConfig(format!(
                "unknown combine {other:?} (expected feature_product, score_diff or recon_loss)"
            ))),
        }
    }
}

impl std::fmt::Display for Combine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Combine::FeatureProduct => "feature_product",
            Combine::ScoreDiff => "score_diff",
            Combine::ReconLoss => "recon_loss",
        })
    }
}

/// How the start times are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    /// `r` steps from every start time in the set.
    #[default]
    Scales,
    /// One long pair from the largest start time down to the bottom of the
    /// grid: index 1 when the model is evaluated on the end states (so the
    /// cost is `k - 1 + 2`), index 0 for the reconstruction loss (cost `k`).
    Continuous,
}

impl std::str::FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scales" => Ok(Schedule::Scales),
            "continuous" => Ok(Schedule::Continuous),
            other => Err(Error::InvalidConfig(format!("unknown schedule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    /// Start times as grid indices, distinct and descending.
    pub t_set: Vec<usize>,
    pub r: usize,
    pub mode: Mode,
    /// Tap layer ids; empty means every tap the model exposes.
    pub layers: Vec<usize>,
    pub combine: Combine,
    pub schedule: Schedule,
    pub seed: u64,
}

impl DetectConfig {
    /// Snap start times to the grid and validate.
    pub fn from_times(spec: &SdeSpec, times: &[f64], r: usize, combine: Combine) -> Result<Self> {
        let t_set = times.iter().map(|&t| spec.grid_index(t)).collect::<Result<Vec<_>>>()?;
        let cfg = Self {
            t_set,
            r,
            mode: Mode::Ode,
            layers: Vec::new(),
            combine,
            schedule: Schedule::Scales,
            seed: 0,
        };
        cfg.validate(spec)?;
        Ok(cfg)
    }

    pub fn validate(&self, spec: &SdeSpec) -> Result<()> {
        if self.t_set.is_empty() {
            return Err(Error::InvalidConfig("detect.t_set is empty".into()));
        }
        if self.r == 0 {
            return Err(Error::InvalidConfig("detect.r must be at least 1".into()));
        }
        if self.t_set.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "detect.t_set must be distinct and descending, got indices {:?}",
                self.t_set
            )));
        }
        for &k in &self.t_set {
            if k >= spec.steps() || k < self.r || k == 0 {
                return Err(Error::GridUnderrun {
                    start: k,
                    steps: self.r,
                });
            }
        }
        Ok(())
    }

    /// Score-model evaluations per input.
    pub fn nfe_per_input(&self) -> u64 {
        let evals = if self.combine == Combine::ReconLoss { 0 } else { 2 };
        match self.schedule {
            Schedule::Scales => self.t_set.len() as u64 * (self.r as u64 + evals),
            Schedule::Continuous => {
                let k = self.t_set[0] as u64;
                if self.combine == Combine::ReconLoss {
                    k
                } else {
                    k - 1 + evals
                }
            }
        }
    }
}

/// Channel-wise Euclidean norm of `a - b`: `[C, H, W] -> [H, W]`, and a
/// single value `[1, 1]` for vectors.
pub fn channel_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.check_same_shape(b)?;
    let sq = channel_sq_distance(a, b)?;
    Ok(sq.map(f64::sqrt))
}

/// Channel-wise squared distance, same shapes as [`channel_distance`].
pub fn channel_sq_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.check_same_shape(b)?;
    match *a.shape() {
        [c, h, w] => {
            let mut out = vec![0.0; h * w];
            for ch in 0..c {
                let base = ch * h * w;
                for (i, o) in out.iter_mut().enumerate() {
                    let d = a.data()[base + i] - b.data()[base + i];
                    *o += d * d;
                }
            }
            Tensor::new(vec![h, w], out)
        }
        [_] => {
            let d: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
            Tensor::new(vec![1, 1], vec![d])
        }
        _ => Err(Error::InvalidConfig(format!(
            "expected a [C, H, W] map or a vector, got shape {:?}",
            a.shape()
        ))),
    }
}

/// Per-layer distance maps between two tap sets, without normalization.
pub fn feature_distance(a: &FeatureTaps, b: &FeatureTaps) -> Result<Vec<(usize, Tensor)>> {
    if a.ids() != b.ids() {
        return Err(Error::Inconsistent(format!(
            "tap layers differ: {:?} vs {:?}",
            a.ids(),
            b.ids()
        )));
    }
    a.layers
        .iter()
        .zip(&b.layers)
        .map(|((id, x), (_, y))| Ok((*id, channel_distance(x, y)?)))
        .collect()
}

/// Corner-aligned bilinear resize of an `[h, w]` map to `[out_h, out_w]`.
pub fn upsample(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [h, w] = *map.shape() else {
        return Err(Error::InvalidConfig(format!(
            "upsample expects [h, w], got {:?}",
            map.shape()
        )));
    };
    if h == 0 || w == 0 || h > out_h || w > out_w {
        return Err(Error::InvalidConfig(format!(
            "cannot upsample {h}x{w} to {out_h}x{out_w}"
        )));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(map.clone());
    }
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_in == 1 || n_out == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let src = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

/// Sum maps across scales per layer, upsample each layer sum to
/// `[out_h, out_w]` and multiply the layers point-wise.
pub fn assemble(per_scale: &[Vec<(usize, Tensor)>], out_h: usize, out_w: usize) -> Result<Tensor> {
    let first = per_scale
        .first()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::InvalidConfig("nothing to assemble: no layers".into()))?;
    let mut result = Tensor::full(&[out_h, out_w], 1.0);
    for (pos, (id, _)) in first.iter().enumerate() {
        let mut sum: Option<Tensor> = None;
        for scale in per_scale {
            let (sid, map) = scale
                .get(pos)
                .ok_or_else(|| Error::Inconsistent("scales tap different layers".into()))?;
            if sid != id {
                return Err(Error::Inconsistent("scales tap different layers".into()));
            }
            sum = Some(match sum {
                None => map.clone(),
                Some(s) => s.zip_map(map, |a, b| a + b)?,
            });
        }
        let up = upsample(&sum.expect("at least one scale"), out_h, out_w)?;
        result = result.zip_map(&up, |a, b| a * b)?;
    }
    Ok(result)
}

/// `||s(x_whole, t) - s(x_self, t)||^2` per location. Two evaluations.
pub fn score_diff_metric<M: ScoreModel + ?Sized>(
    model: &M,
    x_whole: &Tensor,
    x_self: &Tensor,
    t: f64,
) -> Result<Tensor> {
    let a = model.score(x_whole, t)?;
    let b = model.score(x_self, t)?;
    channel_sq_distance(&a, &b)
}

/// `||x_whole - x_self||^2` per location. No evaluations.
pub fn recon_loss_metric(x_whole: &Tensor, x_self: &Tensor) -> Result<Tensor> {
    channel_sq_distance(x_whole, x_self)
}

pub use crate::metrics::image_score;

/// Output resolution of the map for an input of this shape.
fn map_size(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [_, h, w] => Ok((h, w)),
        [_] => Ok((1, 1)),
        _ => Err(Error::InvalidConfig(format!("unsupported input shape {shape:?}"))),
    }
}

fn discrepancy<M: ScoreModel + ?Sized>(
    model: &M,
    pair: &TrajectoryPair,
    combine: Combine,
    layers: &[usize],
) -> Result<Vec<(usize, Tensor)>> {
    match combine {
        Combine::FeatureProduct => {
            let (_, a) = model.score_with_taps(&pair.x_whole, pair.t, layers)?;
            let (_, b) = model.score_with_taps(&pair.x_self, pair.t, layers)?;
            feature_distance(&a, &b)
        }
        Combine::ScoreDiff => Ok(vec![(
            0,
            score_diff_metric(model, &pair.x_whole, &pair.x_self, pair.t)?,
        )]),
        Combine::ReconLoss => Ok(vec![(0, recon_loss_metric(&pair.x_whole, &pair.x_self)?)]),
    }
}

/// Anomaly map of one input and the number of model evaluations it took.
/// Scale `j` of sample `sample_id` draws from stream `(seed, sample_id, j)`.
pub fn detect_one<M: ScoreModel + ?Sized>(
    model: &M,
    spec: &SdeSpec,
    cfg: &DetectConfig,
    x0: &Tensor,
    sample_id: u64,
) -> Result<(Tensor, u64)> {
    cfg.validate(spec)?;
    let (h, w) = map_size(x0.shape())?;
    let layers = if cfg.layers.is_empty() {
        model.tap_layers()
    } else {
        cfg.layers.clone()
    };
    let mut nfe = 0;
    let mut per_scale = Vec::new();
    match cfg.schedule {
        Schedule::Scales => {
            for (j, &k) in cfg.t_set.iter().enumerate() {
                let mut r = rng::stream(cfg.seed, &[sample_id, j as u64]);
                let pair = run_pair(spec, model, x0, k, cfg.r, cfg.mode, &mut r)?;
                nfe += pair.nfe;
                per_scale.push(discrepancy(model, &pair, cfg.combine, &layers)?);
            }
        }
        Schedule::Continuous => {
            let k = cfg.t_set[0];
            let steps = if cfg.combine == Combine::ReconLoss { k } else { k - 1 };
            let mut r = rng::stream(cfg.seed, &[sample_id, 0]);
            let pair = run_pair(spec, model, x0, k, steps, cfg.mode, &mut r)?;
            nfe += pair.nfe;
            per_scale.push(discrepancy(model, &pair, cfg.combine, &layers)?);
        }
    }
    if cfg.combine != Combine::ReconLoss {
        nfe += 2 * per_scale.len() as u64;
    }
    let map = assemble(&per_scale, h, w)?;
    if !map.is_finite() {
        return Err(Error::Divergence { step: 0, t: f64::NAN });
    }
    Ok((map, nfe))
}

/// [`detect_one`] over a batch; input `i` uses sample id `i`.
pub fn detect_batch<M: ScoreModel + ?Sized>(
    model: &M,
    spec: &SdeSpec,
    cfg: &DetectConfig,
    inputs: &[Tensor],
    exec: Exec,
) -> Result<Vec<(Tensor, u64)>> {
    cfg.validate(spec)?;
    exec.try_map(inputs.len(), |i| detect_one(model, spec, cfg, &inputs[i], i as u64))
}
