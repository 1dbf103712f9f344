//! Build core objects (schedule, datasets, networks, detector settings) from a
//! validated [`RunConfig`].

use std::fmt;
use std::path::Path;

use sdd_core::data::{self, DefectKind, ManifestRecord};
use sdd_core::detect::{Combine, DetectConfig, Schedule};
use sdd_core::integrator::Mode;
use sdd_core::nn::{ConvConfig, ConvScoreNet, MlpConfig, MlpScoreNet, Precond, ScoreNet};
use sdd_core::train::{TrainConfig, Weighting};
use sdd_core::{Error, SdeKind, SdeSpec, Tensor};

use crate::config::{ConfigError, RunConfig};

/// Everything a command can fail with, mapped onto the exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Core(e) => match e {
                Error::Divergence { .. } | Error::LossDivergence { .. } | Error::NonFiniteInput => 2,
                Error::Io(_)
                | Error::BadMagic(_)
                | Error::VersionMismatch { .. }
                | Error::BadDtype(_)
                | Error::Truncated(_)
                | Error::Malformed { .. } => 3,
                _ => 1,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => e.fmt(f),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn cfg_err(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config(ConfigError {
        key: key.to_string(),
        message: message.into(),
    })
}

/// Offsets applied to the master seed so each consumer gets its own streams.
pub mod seeds {
    pub const NET: u64 = 0;
    pub const TRAIN: u64 = 1;
    pub const DETECT: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const TEST_DATA: u64 = 4;
}

pub fn seed(cfg: &RunConfig, offset: u64) -> CliResult<u64> {
    Ok(cfg.get::<u64>("seed", 0)?.wrapping_add(offset))
}

pub fn sde_spec(cfg: &RunConfig) -> CliResult<SdeSpec> {
    let kind = match cfg.require("sde.kind")? {
        "ve" => SdeKind::Ve,
        "vp" => SdeKind::Vp,
        _ => SdeKind::SubVp,
    };
    let (lo, hi) = match kind {
        SdeKind::Ve => (cfg.get("sde.sigma_min", 0.01)?, cfg.get("sde.sigma_max", 50.0)?),
        _ => (cfg.get("sde.beta_min", 0.1)?, cfg.get("sde.beta_max", 20.0)?),
    };
    let steps = cfg.get("sde.steps", 1000)?;
    let eps = cfg.get("sde.epsilon", sdd_core::sde::DEFAULT_EPSILON)?;
    SdeSpec::new(kind, lo, hi, steps, eps).map_err(|e| cfg_err("sde", e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Toy,
    Textures,
    Manifest,
}

pub fn data_kind(cfg: &RunConfig) -> CliResult<DataKind> {
    Ok(match cfg.require("data.kind")? {
        "toy" => DataKind::Toy,
        "textures" => DataKind::Textures,
        _ => DataKind::Manifest,
    })
}

/// Test inputs with labels and, for images, ground-truth masks.
#[derive(Debug, Clone, Default)]
pub struct TestSet {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<u8>,
    pub masks: Option<Vec<Tensor>>,
}

fn defect_kinds(cfg: &RunConfig) -> CliResult<Vec<DefectKind>> {
    let names: Vec<String> = cfg
        .list("data.defects")?
        .unwrap_or_else(|| vec!["rect".into(), "ellipse".into()]);
    names
        .iter()
        .map(|n| {
            n.parse()
                .map_err(|_| cfg_err("data.defects", format!("unknown defect {n:?}")))
        })
        .collect()
}

fn image_size(cfg: &RunConfig) -> CliResult<(usize, usize)> {
    Ok((cfg.get("data.height", 32)?, cfg.get("data.width", 32)?))
}

pub fn train_set(cfg: &RunConfig) -> CliResult<Vec<Tensor>> {
    let s = seed(cfg, 0)?;
    match data_kind(cfg)? {
        DataKind::Toy => Ok(data::gen_toy(s, cfg.get("data.n_train", 10_000)?, 1).train),
        DataKind::Textures => {
            let (h, w) = image_size(cfg)?;
            Ok(data::gen_defect_images(s, cfg.get("data.n_train", 500)?, h, w, &[])?.images)
        }
        DataKind::Manifest => {
            let (records, base) = manifest(cfg)?;
            records
                .iter()
                .filter(|r| r.split == "train")
                .map(|r| load_array(&base.join(&r.path), true))
                .collect()
        }
    }
}

pub fn test_set(cfg: &RunConfig) -> CliResult<TestSet> {
    let s = seed(cfg, 0)?;
    match data_kind(cfg)? {
        DataKind::Toy => {
            let toy = data::gen_toy(s, cfg.get("data.n_train", 10_000)?, cfg.get("data.n_test", 200)?);
            let (inputs, labels) = toy.labeled_test();
            Ok(TestSet {
                inputs,
                labels,
                masks: None,
            })
        }
        DataKind::Textures => {
            let (h, w) = image_size(cfg)?;
            let set = data::gen_defect_images(
                s.wrapping_add(seeds::TEST_DATA),
                cfg.get("data.n_test", 100)?,
                h,
                w,
                &defect_kinds(cfg)?,
            )?;
            Ok(TestSet {
                inputs: set.images,
                labels: set.labels,
                masks: Some(set.masks),
            })
        }
        DataKind::Manifest => {
            let (records, base) = manifest(cfg)?;
            let tests: Vec<&ManifestRecord> = records.iter().filter(|r| r.split == "test").collect();
            let inputs = tests
                .iter()
                .map(|r| load_array(&base.join(&r.path), true))
                .collect::<CliResult<Vec<_>>>()?;
            let masks = if tests.iter().all(|r| r.mask.is_some()) && !tests.is_empty() {
                Some(
                    tests
                        .iter()
                        .map(|r| load_array(&base.join(r.mask.as_ref().expect("checked")), false))
                        .collect::<CliResult<Vec<_>>>()?,
                )
            } else {
                None
            };
            Ok(TestSet {
                inputs,
                labels: tests.iter().map(|r| r.label).collect(),
                masks,
            })
        }
    }
}

fn manifest(cfg: &RunConfig) -> CliResult<(Vec<ManifestRecord>, std::path::PathBuf)> {
    let path = cfg
        .path("data.manifest")
        .ok_or_else(|| cfg_err("data.manifest", "required when data.kind = manifest"))?;
    let records = data::read_manifest(&path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((records, base))
}

/// Load a tensor container or a PGM. PGM pixels are scaled to [0, 1]; images
/// get a leading channel axis when `channel` is set.
pub fn load_array(path: &Path, channel: bool) -> CliResult<Tensor> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        let img = data::read_pgm(path)?;
        let values = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        let shape = if channel {
            vec![1, img.height, img.width]
        } else {
            vec![img.height, img.width]
        };
        Ok(Tensor::new(shape, values)?)
    } else {
        Ok(data::read_tensor(path)?.0)
    }
}

fn precond(cfg: &RunConfig, spec: &SdeSpec) -> CliResult<Precond> {
    Ok(match cfg.get::<String>("net.precond", "sigma".into())?.as_str() {
        "none" => Precond::None,
        _ => Precond::Sigma(*spec),
    })
}

/// A freshly initialized network shaped for `example`.
pub fn new_net(cfg: &RunConfig, spec: &SdeSpec, example: &Tensor) -> CliResult<ScoreNet> {
    let default_arch = if example.shape().len() == 1 { "mlp" } else { "conv" };
    let arch: String = cfg.get("net.arch", default_arch.into())?;
    let seed = seed(cfg, seeds::NET)?;
    let n_freqs = cfg.get("net.n_freqs", 16)?;
    let fourier_scale = cfg.get("net.fourier_scale", sdd_core::nn::FOURIER_SCALE)?;
    let precond = precond(cfg, spec)?;
    match (arch.as_str(), example.shape()) {
        ("mlp", &[d]) => {
            let mut c = MlpConfig::new(d, cfg.get("net.hidden", 128)?);
            c.depth = cfg.get("net.depth", 2)?;
            c.n_freqs = n_freqs;
            c.fourier_scale = fourier_scale;
            c.seed = seed;
            c.precond = precond;
            Ok(ScoreNet::Mlp(MlpScoreNet::new(c)?))
        }
        ("conv", &[ch, h, w]) => {
            let mut c = ConvConfig::new(ch, h, w, cfg.get("net.channels", 8)?);
            c.n_freqs = n_freqs;
            c.fourier_scale = fourier_scale;
            c.seed = seed;
            c.precond = precond;
            Ok(ScoreNet::Conv(ConvScoreNet::new(c)?))
        }
        (arch, shape) => Err(cfg_err(
            "net.arch",
            format!("{arch} cannot take inputs of shape {shape:?}"),
        )),
    }
}

/// Reject a checkpoint whose architecture, input shape or schedule disagrees
/// with the configuration.
pub fn check_net(cfg: &RunConfig, spec: &SdeSpec, net: &ScoreNet, example: Option<&Tensor>) -> CliResult<()> {
    let arch = match net {
        ScoreNet::Mlp(_) => "mlp",
        ScoreNet::Conv(_) => "conv",
    };
    if let Some(want) = cfg.raw("net.arch") {
        if want != arch {
            return Err(cfg_err(
                "net.arch",
                format!("config says {want}, checkpoint holds {arch}"),
            ));
        }
    }
    if let Some(x) = example {
        if net.input_shape() != x.shape() {
            return Err(cfg_err(
                "checkpoint",
                format!(
                    "network expects inputs {:?}, data has {:?}",
                    net.input_shape(),
                    x.shape()
                ),
            ));
        }
    }
    let p = match net {
        ScoreNet::Mlp(n) => n.config().precond,
        ScoreNet::Conv(n) => n.config().precond,
    };
    // The grid size may differ; the marginals may not.
    if let Precond::Sigma(trained) = p {
        if (trained.kind(), trained.schedule()) != (spec.kind(), spec.schedule()) {
            return Err(cfg_err(
                "sde",
                format!(
                    "checkpoint was trained for {} {:?}, config describes {} {:?}",
                    trained.kind(),
                    trained.schedule(),
                    spec.kind(),
                    spec.schedule()
                ),
            ));
        }
    }
    Ok(())
}

pub fn train_config(cfg: &RunConfig) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    let weighting = match cfg.get::<String>("train.weighting", "sigma2".into())?.as_str() {
        "unit" => Weighting::Unit,
        _ => Weighting::SigmaSquared,
    };
    let tc = TrainConfig {
        batch: cfg.get("train.batch", d.batch)?,
        steps: cfg.get("train.steps", d.steps)?,
        lr: cfg.get("train.lr", d.lr)?,
        beta1: cfg.get("train.beta1", d.beta1)?,
        beta2: cfg.get("train.beta2", d.beta2)?,
        adam_eps: d.adam_eps,
        weighting,
        seed: seed(cfg, seeds::TRAIN)?,
        checkpoint_every: cfg.get("train.checkpoint_every", 0)?,
        warn_loss: cfg
            .raw("train.warn_loss")
            .map(|_| cfg.get("train.warn_loss", 0.0))
            .transpose()?,
    };
    tc.validate().map_err(|e| cfg_err("train", e.to_string()))?;
    Ok(tc)
}

pub fn mode(cfg: &RunConfig, key: &str) -> CliResult<Mode> {
    cfg.get::<String>(key, "ode".into())?
        .parse::<Mode>()
        .map_err(|_| cfg_err(key, "unknown sampler"))
}

pub fn detect_config(cfg: &RunConfig, spec: &SdeSpec) -> CliResult<DetectConfig> {
    let times: Vec<f64> = match cfg.list("detect.t_set")? {
        Some(t) => t,
        None if data_kind(cfg)? == DataKind::Toy => vec![0.6, 0.5, 0.4, 0.3, 0.2],
        None => vec![0.1, 0.08, 0.06, 0.04, 0.02],
    };
    let combine: Combine = cfg
        .get::<String>("detect.combine", "feature_product".into())?
        .parse()
        .map_err(|_| cfg_err("detect.combine", "unknown combine mode"))?;
    let schedule: Schedule = cfg
        .get::<String>("detect.schedule", "scales".into())?
        .parse()
        .map_err(|_| cfg_err("detect.schedule", "unknown schedule"))?;
    let mut dc = DetectConfig::from_times(spec, &times, cfg.get("detect.r", 1)?, combine)
        .map_err(|e| cfg_err("detect.t_set", e.to_string()))?;
    dc.mode = mode(cfg, "detect.mode")?;
    dc.layers = cfg.list("detect.layers")?.unwrap_or_default();
    dc.schedule = schedule;
    dc.seed = seed(cfg, seeds::DETECT)?;
    dc.validate(spec).map_err(|e| cfg_err("detect", e.to_string()))?;
    Ok(dc)
}

/// A short identifier for a detector configuration, used in result tables.
pub fn config_id(dc: &DetectConfig) -> String {
    let sched = match dc.schedule {
        Schedule::Scales => format!("T{}r{}", dc.t_set.len(), dc.r),
        Schedule::Continuous => format!("cont{}", dc.t_set[0]),
    };
    format!("{sched}-{}-{}", dc.mode, dc.combine)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> RunConfig {
        RunConfig::parse(text).unwrap()
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from(Error::LossDivergence { step: 3 }).exit_code(), 2);
        assert_eq!(CliError::from(Error::Truncated("x".into())).exit_code(), 3);
        assert_eq!(CliError::from(Error::InvalidConfig("x".into())).exit_code(), 1);
        assert_eq!(
            CliError::from(cfg("seed = 1").require("sde.kind").unwrap_err()).exit_code(),
            1
        );
    }

    #[test]
    fn spec_defaults_and_errors() {
        let s = sde_spec(&cfg(
            "sde.kind = ve\nsde.sigma_min = 0.1\nsde.sigma_max = 20\nsde.steps = 100",
        ))
        .unwrap();
        assert_eq!(s, SdeSpec::toy_ve(100));
        let e = sde_spec(&RunConfig::default()).unwrap_err();
        assert!(e.to_string().contains("sde.kind"));
        assert!(sde_spec(&cfg("sde.kind = vp\nsde.beta_min = 5\nsde.beta_max = 1")).is_err());
    }

    #[test]
    fn detect_defaults_snap_to_grid() {
        let c = cfg("sde.kind = vp\ndata.kind = textures");
        let spec = sde_spec(&c).unwrap();
        let dc = detect_config(&c, &spec).unwrap();
        assert_eq!(dc.t_set, vec![100, 80, 60, 40, 20]);
        assert_eq!(config_id(&dc), "T5r1-ode-feature_product");
        let c = cfg("sde.kind = ve\nsde.steps = 100\ndata.kind = toy\ndetect.t_set = 0.2, 0.6");
        let spec = sde_spec(&c).unwrap();
        assert!(detect_config(&c, &spec).is_err());
    }

    #[test]
    fn arch_mismatch_is_a_config_error() {
        let c = cfg(
            "sde.kind = ve\nsde.sigma_min = 0.1\nsde.sigma_max = 20\nsde.steps = 100\ndata.kind = toy\nnet.hidden = 8",
        );
        let spec = sde_spec(&c).unwrap();
        let x = Tensor::vector(vec![0.0, 0.0]);
        let net = new_net(&c, &spec, &x).unwrap();
        check_net(&c, &spec, &net, Some(&x)).unwrap();
        let conv = cfg("sde.kind = ve\nsde.steps = 100\nnet.arch = conv");
        assert_eq!(check_net(&conv, &spec, &net, Some(&x)).unwrap_err().exit_code(), 1);
        check_net(&c, &SdeSpec::toy_ve(200), &net, Some(&x)).unwrap();
        let other = SdeSpec::ve(0.1, 30.0, 100, 1e-5).unwrap();
        assert!(check_net(&c, &other, &net, Some(&x)).is_err());
        assert!(check_net(&c, &spec, &net, Some(&Tensor::vector(vec![0.0; 3]))).is_err());
    }
}
