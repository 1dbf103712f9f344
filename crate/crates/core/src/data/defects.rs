use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Mean and standard deviation every normal texture is normalized to.
pub const TEXTURE_MEAN: f64 = 0.5;
pub const TEXTURE_STD: f64 = 0.1;
/// Gaussian blur width (pixels) that band-limits the white noise.
pub const TEXTURE_BLUR: f64 = 1.5;
/// Magnitude of the intensity shift inside a defect.
pub const DEFECT_SHIFT: f64 = 0.3;
pub const MIN_DEFECT_AREA: f64 = 0.01;
pub const MAX_DEFECT_AREA: f64 = 0.20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefectKind {
    Rectangle,
    Ellipse,
}

impl std::str::FromStr for DefectKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rect" | "rectangle" => Ok(DefectKind::Rectangle),
            "ellipse" => Ok(DefectKind::Ellipse),
            other => Err(Error::InvalidConfig(format!("unknown defect kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DefectImageSet {
    /// `[1, H, W]` in [0, 1].
    pub images: Vec<Tensor>,
    /// `[H, W]` with values in {0, 1}.
    pub masks: Vec<Tensor>,
    pub labels: Vec<u8>,
    pub splits: Vec<String>,
}

impl DefectImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Smoothed white noise with periodic boundary, normalized per image.
pub fn texture<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Vec<f64> {
    let noise: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let radius = (3.0 * TEXTURE_BLUR).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * TEXTURE_BLUR * TEXTURE_BLUR)).exp())
        .collect();
    let blur = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let off = i as isize - radius;
                    let (yy, xx) = if horizontal {
                        (y, (x as isize + off).rem_euclid(w as isize) as usize)
                    } else {
                        ((y as isize + off).rem_euclid(h as isize) as usize, x)
                    };
                    acc += kv * src[yy * w + xx];
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    let smooth = blur(&blur(&noise, true), false);
    let mean = smooth.iter().sum::<f64>() / smooth.len() as f64;
    let var = smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / smooth.len() as f64;
    let sd = var.sqrt().max(1e-12);
    smooth
        .iter()
        .map(|v| (TEXTURE_MEAN + TEXTURE_STD * (v - mean) / sd).clamp(0.0, 1.0))
        .collect()
}

/// Draw a defect mask whose area fraction lies in [1%, 20%].
fn defect_mask<R: Rng + ?Sized>(kind: DefectKind, h: usize, w: usize, rng: &mut R) -> Vec<f64> {
    let total = (h * w) as f64;
    loop {
        let mut mask = vec![0.0; h * w];
        match kind {
            DefectKind::Rectangle => {
                let rh = rng.gen_range((h / 8).max(2)..=(h * 3 / 8).max(2));
                let rw = rng.gen_range((w / 8).max(2)..=(w * 3 / 8).max(2));
                let y0 = rng.gen_range(0..=h - rh);
                let x0 = rng.gen_range(0..=w - rw);
                for y in y0..y0 + rh {
                    mask[y * w + x0..y * w + x0 + rw].fill(1.0);
                }
            }
            DefectKind::Ellipse => {
                let a = rng.gen_range(h as f64 / 12.0..h as f64 / 5.0).max(1.5);
                let b = rng.gen_range(w as f64 / 12.0..w as f64 / 5.0).max(1.5);
                let cy = rng.gen_range(a..h as f64 - a);
                let cx = rng.gen_range(b..w as f64 - b);
                for y in 0..h {
                    for x in 0..w {
                        let dy = (y as f64 + 0.5 - cy) / a;
                        let dx = (x as f64 + 0.5 - cx) / b;
                        if dy * dy + dx * dx <= 1.0 {
                            mask[y * w + x] = 1.0;
                        }
                    }
                }
            }
        }
        let frac = mask.iter().sum::<f64>() / total;
        if (MIN_DEFECT_AREA..=MAX_DEFECT_AREA).contains(&frac) {
            return mask;
        }
    }
}

/// Generate `n` grayscale textures.
///
/// With no defect kinds every image is normal and tagged `train`. Otherwise
/// images alternate normal / defective (odd indices carry a defect of a
/// kind cycling through `kinds`) and are tagged `test`. A defect shifts the
/// intensity inside its mask by `±0.3`.
pub fn gen_defect_images(seed: u64, n: usize, h: usize, w: usize, kinds: &[DefectKind]) -> Result<DefectImageSet> {
    if !h.is_multiple_of(4) || !w.is_multiple_of(4) || h < 8 || w < 8 {
        return Err(Error::InvalidConfig(format!(
            "image size must be divisible by 4 and at least 8, got {h}x{w}"
        )));
    }
    let split = if kinds.is_empty() { "train" } else { "test" };
    let mut set = DefectImageSet::default();
    for i in 0..n {
        let mut r = rng::stream(seed, &[0xD1, i as u64]);
        let mut img = texture(h, w, &mut r);
        let mut mask = vec![0.0; h * w];
        let defective = !kinds.is_empty() && i % 2 == 1;
        if defective {
            let kind = kinds[(i / 2) % kinds.len()];
            mask = defect_mask(kind, h, w, &mut r);
            let shift = if r.gen::<bool>() { DEFECT_SHIFT } else { -DEFECT_SHIFT };
            for (p, m) in img.iter_mut().zip(&mask) {
                if *m > 0.0 {
                    *p = (*p + shift).clamp(0.0, 1.0);
                }
            }
        }
        set.images.push(Tensor::new(vec![1, h, w], img)?);
        set.masks.push(Tensor::new(vec![h, w], mask)?);
        set.labels.push(u8::from(defective));
        set.splits.push(split.to_string());
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_request() {
        let s = gen_defect_images(1, 0, 32, 32, &[DefectKind::Rectangle]).unwrap();
        assert!(s.is_empty());
        assert!(gen_defect_images(1, 2, 30, 32, &[]).is_err());
    }

    #[test]
    fn masks_and_ranges() {
        let s = gen_defect_images(3, 40, 32, 32, &[DefectKind::Rectangle, DefectKind::Ellipse]).unwrap();
        for i in 0..s.len() {
            assert!(s.images[i].data().iter().all(|v| (0.0..=1.0).contains(v)));
            let area = s.masks[i].mean();
            if s.labels[i] == 0 {
                assert_eq!(area, 0.0);
            } else {
                assert!((MIN_DEFECT_AREA..=MAX_DEFECT_AREA).contains(&area), "{area}");
            }
            assert_eq!(s.splits[i], "test");
        }
        assert_eq!(s.labels.iter().filter(|&&l| l == 1).count(), 20);
    }

    #[test]
    fn normal_statistics_are_stable_across_seeds() {
        for seed in 0..10 {
            let s = gen_defect_images(seed, 20, 32, 32, &[]).unwrap();
            let m = s.images.iter().map(|t| t.mean()).sum::<f64>() / s.len() as f64;
            assert!((m - TEXTURE_MEAN).abs() < 0.05, "seed {seed}: {m}");
            assert!(s.labels.iter().all(|&l| l == 0));
        }
    }

    #[test]
    fn deterministic() {
        let a = gen_defect_images(9, 4, 16, 16, &[DefectKind::Ellipse]).unwrap();
        let b = gen_defect_images(9, 4, 16, 16, &[DefectKind::Ellipse]).unwrap();
        assert!(a.images.iter().zip(&b.images).all(|(p, q)| p.bit_eq(q)));
    }
}
