//! Self-describing checkpoint format.
//!
//! Layout: magic `SDDM`, u32 version, u32 descriptor length, UTF-8
//! descriptor (`key=value` lines), then for each tensor a u32 name length,
//! the name and an `SDD1` tensor container holding f64 values.

use std::collections::BTreeMap;
use std::path::Path;

use super::conv::{ConvConfig, ConvScoreNet};
use super::embedding::TimeEmbedding;
use super::mlp::{MlpConfig, MlpScoreNet};
use super::{Precond, ScoreNet};
use crate::data::{decode_from, encode_tensor, Dtype, Reader};
use crate::error::{Error, Result};
use crate::sde::{SdeKind, SdeSpec};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDDM";
pub const CHECKPOINT_VERSION: u32 = 1;

const FREQ_TENSOR: &str = "embed.freq";

fn descriptor(net: &ScoreNet) -> BTreeMap<&'static str, String> {
    let mut d = BTreeMap::new();
    let (embed, precond) = match net {
        ScoreNet::Mlp(n) => {
            let c = n.config();
            d.insert("arch", "mlp".to_string());
            d.insert("dim", c.dim.to_string());
            d.insert("hidden", c.hidden.to_string());
            d.insert("depth", c.depth.to_string());
            (n.embedding(), c.precond)
        }
        ScoreNet::Conv(n) => {
            let c = n.config();
            d.insert("arch", "conv".to_string());
            d.insert("channels", c.in_channels.to_string());
            d.insert("height", c.height.to_string());
            d.insert("width", c.width.to_string());
            d.insert("base_channels", c.base_channels.to_string());
            (n.embedding(), c.precond)
        }
    };
    d.insert("n_freqs", embed.freqs().len().to_string());
    // `{:?}` on f64 round-trips exactly.
    d.insert("fourier_scale", format!("{:?}", embed.scale()));
    d.insert("seed", embed.seed().to_string());
    match precond {
        Precond::None => {
            d.insert("precond", "none".to_string());
        }
        Precond::Sigma(spec) => {
            let (lo, hi) = spec.schedule();
            d.insert("precond", "sigma".to_string());
            d.insert("sde", spec.kind().to_string());
            d.insert("sde_lo", format!("{lo:?}"));
            d.insert("sde_hi", format!("{hi:?}"));
            d.insert("sde_steps", spec.steps().to_string());
            d.insert("sde_epsilon", format!("{:?}", spec.epsilon()));
        }
    }
    d.insert("taps", net.tap_layers_string());
    d.insert("tensors", (net.layout().entries().len() + 1).to_string());
    d
}

impl ScoreNet {
    fn tap_layers_string(&self) -> String {
        use super::ScoreModel;
        self.tap_layers()
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

pub fn encode_checkpoint(net: &ScoreNet) -> Vec<u8> {
    let desc: String = descriptor(net).iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    let mut put = |name: &str, t: &Tensor| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&encode_tensor(t, Dtype::F64));
    };
    let freqs = net.embedding().freqs().to_vec();
    put(FREQ_TENSOR, &Tensor::vector(freqs));
    for e in net.layout().entries() {
        let t = Tensor::new(e.shape.clone(), net.params()[e.range()].to_vec()).expect("layout shape");
        put(&e.name, &t);
    }
    out
}

pub fn save_checkpoint(path: impl AsRef<Path>, net: &ScoreNet) -> Result<()> {
    std::fs::write(path, encode_checkpoint(net))?;
    Ok(())
}

struct Desc<'a> {
    map: BTreeMap<String, String>,
    path: &'a Path,
}

impl Desc<'_> {
    fn str(&self, key: &str) -> Result<&str> {
        self.map.get(key).map(String::as_str).ok_or_else(|| Error::Malformed {
            path: self.path.to_path_buf(),
            reason: format!("descriptor lacks {key:?}"),
        })
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.str(key)?;
        raw.parse().map_err(|_| Error::Malformed {
            path: self.path.to_path_buf(),
            reason: format!("descriptor value {key}={raw:?} does not parse"),
        })
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ScoreNet> {
    let mut r = Reader::new(bytes, path);
    if bytes.len() < 4 || r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Malformed {
        path: path.to_path_buf(),
        reason: "descriptor is not UTF-8".into(),
    })?;
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("descriptor line {line:?} lacks '='"),
        })?;
        map.insert(k.to_string(), v.to_string());
    }
    let desc = Desc { map, path };

    let n_tensors: usize = desc.parse("tensors")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Malformed {
            path: path.to_path_buf(),
            reason: "tensor name is not UTF-8".into(),
        })?;
        let (t, _) = decode_from(&mut r)?;
        tensors.insert(name, t);
    }
    if !r.is_done() {
        return Err(Error::Inconsistent("trailing bytes after last tensor".into()));
    }

    let precond = match desc.str("precond")? {
        "none" => Precond::None,
        "sigma" => {
            let kind: SdeKind = desc.parse("sde")?;
            Precond::Sigma(SdeSpec::new(
                kind,
                desc.parse("sde_lo")?,
                desc.parse("sde_hi")?,
                desc.parse("sde_steps")?,
                desc.parse("sde_epsilon")?,
            )?)
        }
        other => return Err(Error::Inconsistent(format!("unknown preconditioning {other:?}"))),
    };
    let n_freqs: usize = desc.parse("n_freqs")?;
    let fourier_scale: f64 = desc.parse("fourier_scale")?;
    let seed: u64 = desc.parse("seed")?;
    let freqs = tensors
        .remove(FREQ_TENSOR)
        .ok_or_else(|| Error::Inconsistent(format!("missing tensor {FREQ_TENSOR}")))?;
    if freqs.len() != n_freqs {
        return Err(Error::Inconsistent(format!(
            "descriptor says {n_freqs} frequencies, tensor holds {}",
            freqs.len()
        )));
    }
    let embed = TimeEmbedding::from_parts(freqs.into_data(), fourier_scale, seed);

    let net = match desc.str("arch")? {
        "mlp" => {
            let config = MlpConfig {
                dim: desc.parse("dim")?,
                hidden: desc.parse("hidden")?,
                depth: desc.parse("depth")?,
                n_freqs,
                fourier_scale,
                seed,
                precond,
            };
            let skeleton = MlpScoreNet::new(config.clone())?;
            let params = gather(skeleton.layout(), &mut tensors)?;
            ScoreNet::Mlp(MlpScoreNet::from_parts(config, embed, params)?)
        }
        "conv" => {
            let config = ConvConfig {
                in_channels: desc.parse("channels")?,
                height: desc.parse("height")?,
                width: desc.parse("width")?,
                base_channels: desc.parse("base_channels")?,
                n_freqs,
                fourier_scale,
                seed,
                precond,
            };
            let skeleton = ConvScoreNet::new(config.clone())?;
            let params = gather(skeleton.layout(), &mut tensors)?;
            ScoreNet::Conv(ConvScoreNet::from_parts(config, embed, params)?)
        }
        other => return Err(Error::Inconsistent(format!("unknown architecture {other:?}"))),
    };
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Inconsistent(format!("unexpected tensor {name:?}")));
    }
    if desc.str("taps")? != net.tap_layers_string() {
        return Err(Error::Inconsistent("tap list does not match architecture".into()));
    }
    Ok(net)
}

fn gather(layout: &super::ParamLayout, tensors: &mut BTreeMap<String, Tensor>) -> Result<Vec<f64>> {
    let mut params = vec![0.0; layout.len()];
    for e in layout.entries() {
        let t = tensors
            .remove(&e.name)
            .ok_or_else(|| Error::Inconsistent(format!("missing tensor {:?}", e.name)))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Inconsistent(format!(
                "tensor {:?} has shape {:?}, descriptor implies {:?}",
                e.name,
                t.shape(),
                e.shape
            )));
        }
        params[e.range()].copy_from_slice(t.data());
    }
    Ok(params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ScoreNet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ScoreModel;

    fn mlp() -> ScoreNet {
        let mut c = MlpConfig::new(2, 8);
        c.seed = 3;
        c.precond = Precond::Sigma(SdeSpec::toy_ve(100));
        let mut net = MlpScoreNet::new(c).unwrap();
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            *p += (i as f64 * 0.37).sin() * 1e-3;
        }
        ScoreNet::Mlp(net)
    }

    fn conv() -> ScoreNet {
        let mut c = ConvConfig::new(1, 8, 8, 2);
        c.seed = 4;
        ScoreNet::Conv(ConvScoreNet::new(c).unwrap())
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for net in [mlp(), conv()] {
            let path = dir.path().join("net.ckpt");
            save_checkpoint(&path, &net).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back, net);
            let x = Tensor::full(&net.input_shape(), 0.3);
            assert!(back.score(&x, 0.4).unwrap().bit_eq(&net.score(&x, 0.4).unwrap()));
        }
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let p = Path::new("x");
        let mut bytes = encode_checkpoint(&mlp());
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes, p), Err(Error::BadMagic(_))));
        let mut bytes = encode_checkpoint(&mlp());
        bytes[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bytes, p),
            Err(Error::VersionMismatch { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn rejects_truncation() {
        let bytes = encode_checkpoint(&conv());
        for cut in [6, 20, bytes.len() / 2, bytes.len() - 1] {
            let r = decode_checkpoint(&bytes[..cut], Path::new("x"));
            assert!(matches!(r, Err(Error::Truncated(_))), "cut {cut}: {r:?}");
        }
    }

    #[test]
    fn rejects_inconsistent_descriptor() {
        let bytes = encode_checkpoint(&mlp());
        let text = String::from_utf8_lossy(&bytes).into_owned();
        assert!(text.contains("hidden=8"));
        // Same length edit keeps the framing valid.
        let pos = bytes.windows(8).position(|w| w == b"hidden=8").unwrap();
        let mut bad = bytes.clone();
        bad[pos + 7] = b'9';
        assert!(matches!(
            decode_checkpoint(&bad, Path::new("x")),
            Err(Error::Inconsistent(_))
        ));
    }
}
