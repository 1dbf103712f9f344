use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use sdd_core::data::{self, Dtype, ManifestRecord, PAPER_POINTS};
use sdd_core::detect::{self, Combine, DetectConfig, Schedule};
use sdd_core::integrator::{self, Mode};
use sdd_core::metrics::{self, NfeRun, ResultRow};
use sdd_core::nn::{self, CountingModel, MixtureScore, ScoreModel, ScoreNet, SelfScoreStub};
use sdd_core::oracle::GaussianMixture;
use sdd_core::{rng, train, Exec, SdeSpec, Tensor};

use crate::config::RunConfig;
use crate::setup::{self, seeds, CliError, CliResult, DataKind, TestSet};

/// Which score model drives the whole-score branch.
pub enum Scorer {
    Net(ScoreNet),
    /// Exact score of the toy mixture.
    Oracle(MixtureScore),
    /// Each input's own self-score; every anomaly map is identically zero.
    Stub,
}

impl Scorer {
    pub fn load(
        cfg: &RunConfig,
        spec: &SdeSpec,
        oracle: bool,
        stub: bool,
        example: Option<&Tensor>,
    ) -> CliResult<Self> {
        if stub {
            return Ok(Scorer::Stub);
        }
        if oracle {
            return Ok(Scorer::Oracle(MixtureScore {
                mixture: GaussianMixture::toy(),
                spec: *spec,
            }));
        }
        let path = cfg.path("checkpoint").ok_or_else(|| {
            CliError::Config(crate::config::ConfigError {
                key: "checkpoint".into(),
                message: "required (or pass --oracle / --oracle-stub)".into(),
            })
        })?;
        let net = nn::load_checkpoint(&path)?;
        setup::check_net(cfg, spec, &net, example)?;
        Ok(Scorer::Net(net))
    }

    /// Run `f` with the model for input `x0`.
    fn with<T>(&self, spec: &SdeSpec, x0: &Tensor, f: impl FnOnce(&dyn ScoreModel) -> T) -> T {
        match self {
            Scorer::Net(n) => f(n),
            Scorer::Oracle(m) => f(m),
            Scorer::Stub => f(&SelfScoreStub {
                spec: *spec,
                x0: x0.clone(),
            }),
        }
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents)?;
    Ok(())
}

/// Stack same-shaped tensors along a new leading axis.
fn stack(items: &[Tensor], shape: &[usize]) -> CliResult<Tensor> {
    let mut full = vec![items.len()];
    full.extend_from_slice(shape);
    let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::new(full, data)?)
}

fn pgm_of(map: &Tensor) -> Option<data::GrayImage> {
    match *map.shape() {
        [h, w] if h > 1 && w > 1 => Some(data::to_gray(map.data(), w, h)),
        [1, h, w] if h > 1 && w > 1 => Some(data::to_gray(map.data(), w, h)),
        _ => None,
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let train = setup::train_set(cfg)?;
    let test = setup::test_set(cfg)?;
    for sub in ["train", "test", "masks"] {
        create_dir(&out.join(sub))?;
    }
    let mut records = Vec::new();
    for (i, x) in train.iter().enumerate() {
        let rel = PathBuf::from(format!("train/{i:05}.sdd"));
        data::write_tensor(out.join(&rel), x, Dtype::F64)?;
        records.push(ManifestRecord {
            path: rel,
            split: "train".into(),
            label: 0,
            mask: None,
        });
    }
    for (i, x) in test.inputs.iter().enumerate() {
        let rel = PathBuf::from(format!("test/{i:05}.sdd"));
        data::write_tensor(out.join(&rel), x, Dtype::F64)?;
        let mask = match &test.masks {
            Some(masks) => {
                let m = PathBuf::from(format!("masks/{i:05}.sdd"));
                data::write_tensor(out.join(&m), &masks[i], Dtype::F64)?;
                Some(m)
            }
            None => None,
        };
        records.push(ManifestRecord {
            path: rel,
            split: "test".into(),
            label: test.labels[i],
            mask,
        });
    }
    data::write_manifest(out.join("manifest.tsv"), &records)?;
    info!(
        "wrote {} train and {} test items to {}",
        train.len(),
        test.inputs.len(),
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let spec = setup::sde_spec(cfg)?;
    let tc = setup::train_config(cfg)?;
    let dataset = setup::train_set(cfg)?;
    let first = dataset
        .first()
        .ok_or_else(|| sdd_core::Error::InvalidConfig("training set is empty".into()))?;
    let net = setup::new_net(cfg, &spec, first)?;
    create_dir(out)?;
    info!("training {} parameters for {} steps", net.params().len(), tc.steps);
    let (net, losses) = train::train_with(net, &spec, &dataset, &tc, Exec::default(), |step, net| {
        let path = out.join(format!("model_step{step:06}.ckpt"));
        info!("checkpoint {}", path.display());
        nn::save_checkpoint(path, net)
    })?;
    nn::save_checkpoint(out.join("model.ckpt"), &net)?;
    write(&out.join("loss.csv"), train::format_loss_csv(&losses))?;
    Ok(())
}

pub fn sample(cfg: &RunConfig, n: usize, out: &Path) -> CliResult<()> {
    let spec = setup::sde_spec(cfg)?;
    let Scorer::Net(net) = Scorer::load(cfg, &spec, false, false, None)? else {
        unreachable!("sampling always uses a checkpoint")
    };
    let shape = net.input_shape();
    let mode = setup::mode(cfg, "sample.mode")?;
    let (xs, nfe) = integrator::generate_many(
        &spec,
        &net,
        &shape,
        n,
        mode,
        setup::seed(cfg, seeds::SAMPLE)?,
        Exec::default(),
    )?;
    create_dir(out)?;
    data::write_tensor(out.join("samples.sdd"), &stack(&xs, &shape)?, Dtype::F64)?;
    if shape.len() == 1 {
        let mut csv = String::from("index");
        for c in 0..shape[0] {
            csv.push_str(&format!(",coord{c}"));
        }
        csv.push('\n');
        for (i, x) in xs.iter().enumerate() {
            csv.push_str(&i.to_string());
            for v in x.data() {
                csv.push_str(&format!(",{v:?}"));
            }
            csv.push('\n');
        }
        write(&out.join("samples.csv"), csv)?;
    } else {
        for (i, x) in xs.iter().enumerate() {
            if let Some(img) = pgm_of(&x.map(|v| v.clamp(0.0, 1.0))) {
                data::write_pgm(out.join(format!("sample_{i:05}.pgm")), &img)?;
            }
        }
    }
    info!("{n} samples, {nfe} network evaluations");
    Ok(())
}

/// Maps and per-input NFE for every test input.
pub fn run_detector(
    scorer: &Scorer,
    spec: &SdeSpec,
    dc: &DetectConfig,
    inputs: &[Tensor],
) -> CliResult<Vec<(Tensor, u64)>> {
    dc.validate(spec)?;
    Ok(Exec::default().try_map(inputs.len(), |i| {
        scorer.with(spec, &inputs[i], |m| {
            detect::detect_one(m, spec, dc, &inputs[i], i as u64)
        })
    })?)
}

pub struct DetectOptions {
    pub oracle: bool,
    pub stub: bool,
    pub timing: bool,
}

pub fn detect(cfg: &RunConfig, opts: &DetectOptions, out: &Path) -> CliResult<()> {
    let spec = setup::sde_spec(cfg)?;
    let dc = setup::detect_config(cfg, &spec)?;
    let test: TestSet = setup::test_set(cfg)?;
    let scorer = Scorer::load(cfg, &spec, opts.oracle, opts.stub, test.inputs.first())?;
    let started = Instant::now();
    let results = run_detector(&scorer, &spec, &dc, &test.inputs)?;
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;

    for sub in ["maps", "masks"] {
        create_dir(&out.join(sub))?;
    }
    let mut scores = String::from("index,label,score,nfe\n");
    let mut records = Vec::new();
    let mut total_nfe = 0;
    for (i, (map, nfe)) in results.iter().enumerate() {
        let rel = PathBuf::from(format!("maps/{i:05}.sdd"));
        data::write_tensor(out.join(&rel), map, Dtype::F64)?;
        if let Some(img) = pgm_of(map) {
            data::write_pgm(out.join(format!("maps/{i:05}.pgm")), &img)?;
        }
        let mask = match &test.masks {
            Some(masks) => {
                let m = PathBuf::from(format!("masks/{i:05}.sdd"));
                data::write_tensor(out.join(&m), &masks[i], Dtype::F64)?;
                Some(m)
            }
            None => None,
        };
        records.push(ManifestRecord {
            path: rel,
            split: "test".into(),
            label: test.labels[i],
            mask,
        });
        scores.push_str(&format!(
            "{i},{},{:?},{nfe}\n",
            test.labels[i],
            metrics::image_score(map)?
        ));
        total_nfe += nfe;
    }
    data::write_manifest(out.join("detect.tsv"), &records)?;
    write(&out.join("scores.csv"), scores)?;
    let dataset = match setup::data_kind(cfg)? {
        DataKind::Toy => "toy",
        DataKind::Textures => "textures",
        DataKind::Manifest => "manifest",
    };
    let mut run = format!(
        "dataset={dataset}\nconfig_id={}\ntotal_nfe={total_nfe}\n",
        setup::config_id(&dc)
    );
    if opts.timing {
        run.push_str(&format!("wall_ms={wall_ms:.0}\n"));
    }
    write(&out.join("run.txt"), run)?;
    info!("{} inputs, {total_nfe} network evaluations", results.len());
    Ok(())
}

fn read_run(dir: &Path) -> CliResult<Vec<(String, String)>> {
    let path = dir.join("run.txt");
    let text = fs::read_to_string(&path)?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

/// One results row per detection output directory.
pub fn eval(runs: &[PathBuf], out: &Path) -> CliResult<()> {
    let mut rows = Vec::new();
    for dir in runs {
        let meta = read_run(dir)?;
        let field = |k: &str| meta.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());
        let malformed = |reason: &str| sdd_core::Error::Malformed {
            path: dir.join("run.txt"),
            reason: reason.into(),
        };
        let records = data::read_manifest(dir.join("detect.tsv"))?;
        let maps = records
            .iter()
            .map(|r| setup::load_array(&dir.join(&r.path), false))
            .collect::<CliResult<Vec<_>>>()?;
        let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
        let image_auroc = metrics::image_auroc(&maps, &labels)?;
        let pixel_auroc = if !records.is_empty() && records.iter().all(|r| r.mask.is_some()) {
            let masks = records
                .iter()
                .map(|r| setup::load_array(&dir.join(r.mask.as_ref().expect("checked")), false))
                .collect::<CliResult<Vec<_>>>()?;
            Some(metrics::pixel_auroc(&maps, &masks)?)
        } else {
            None
        };
        rows.push(ResultRow {
            dataset: field("dataset").ok_or_else(|| malformed("missing dataset"))?,
            config_id: field("config_id").ok_or_else(|| malformed("missing config_id"))?,
            image_auroc: Some(image_auroc),
            pixel_auroc,
            total_nfe: field("total_nfe")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| malformed("missing total_nfe"))?,
            wall_ms: field("wall_ms").and_then(|v| v.parse().ok()).unwrap_or(0.0),
        });
    }
    if let Some(parent) = out.parent() {
        create_dir(parent)?;
    }
    write(out, metrics::format_results_csv(&rows))
}

/// Compare the configured detector with the continuous-time variants on the
/// first `n` test inputs. `counted` is the number of score evaluations
/// actually observed.
pub fn nfe(cfg: &RunConfig, opts: &DetectOptions, n: usize, out: &Path) -> CliResult<()> {
    let spec = setup::sde_spec(cfg)?;
    let base = setup::detect_config(cfg, &spec)?;
    let test = setup::test_set(cfg)?;
    let inputs = &test.inputs[..n.min(test.inputs.len())];
    let scorer = Scorer::load(cfg, &spec, opts.oracle, opts.stub, inputs.first())?;

    let continuous = |combine| DetectConfig {
        t_set: vec![base.t_set[0]],
        combine,
        schedule: Schedule::Continuous,
        ..base.clone()
    };
    let variants = [
        base.clone(),
        continuous(Combine::ScoreDiff),
        continuous(Combine::ReconLoss),
    ];
    let mut runs = Vec::new();
    let mut counted = Vec::new();
    for dc in &variants {
        let id = setup::config_id(dc);
        let mut calls = 0;
        for (i, x) in inputs.iter().enumerate() {
            let started = Instant::now();
            let (nfe, c) = scorer.with(&spec, x, |m| {
                let counter = CountingModel::new(m);
                detect::detect_one(&counter, &spec, dc, x, i as u64).map(|(_, nfe)| (nfe, counter.calls()))
            })?;
            calls += c;
            runs.push(NfeRun {
                config_id: id.clone(),
                nfe,
                wall_ms: if opts.timing {
                    started.elapsed().as_secs_f64() * 1e3
                } else {
                    0.0
                },
            });
        }
        counted.push(calls);
    }
    let mut csv = String::from("config_id,runs,total_nfe,nfe_per_input,counted");
    if opts.timing {
        csv.push_str(",wall_ms");
    }
    csv.push('\n');
    for (row, calls) in metrics::nfe_report(&runs).iter().zip(counted) {
        csv.push_str(&format!(
            "{},{},{},{},{calls}",
            row.config_id,
            row.runs,
            row.total_nfe,
            row.total_nfe / row.runs.max(1) as u64
        ));
        if opts.timing {
            csv.push_str(&format!(",{:.0}", row.wall_ms));
        }
        csv.push('\n');
    }
    if let Some(parent) = out.parent() {
        create_dir(parent)?;
    }
    write(out, csv)
}

pub const TOY_TIMES: [f64; 2] = [0.6, 1.0];

/// Whole/self trajectories of the three reference points, per start time and
/// sampler, plus a summary table.
pub fn toy2d(cfg: &RunConfig, checkpoint: bool, out: &Path) -> CliResult<()> {
    let spec = if cfg.has("sde.kind") {
        setup::sde_spec(cfg)?
    } else {
        SdeSpec::toy_ve(100)
    };
    let example = Tensor::vector(vec![0.0, 0.0]);
    let scorer = Scorer::load(cfg, &spec, !checkpoint, false, Some(&example))?;
    let mixture = GaussianMixture::toy();
    let seed = setup::seed(cfg, seeds::DETECT)?;
    create_dir(out)?;
    let mut summary = String::from("point,label,t,sampler,score_diff,whole_to_start,self_to_start,whole_to_mode\n");
    for (p, (coords, label)) in PAPER_POINTS.iter().enumerate() {
        let x0 = Tensor::vector(coords.to_vec());
        let name = format!("p{p}");
        for (ti, &t) in TOY_TIMES.iter().enumerate() {
            let start = spec.grid_index(t)?;
            for (mi, mode) in [Mode::Ode, Mode::Sde].into_iter().enumerate() {
                let mut r = rng::stream(seed, &[p as u64, ti as u64, mi as u64]);
                let (pair, records) = scorer.with(&spec, &x0, |m| {
                    integrator::record_pair(&spec, m, &x0, start, mode, &mut r)
                })?;
                let csv = integrator::format_trajectory_csv(&records);
                let header = csv.lines().next().unwrap_or_default();
                for branch in ["whole", "self"] {
                    let mut body = format!("{header}\n");
                    for line in csv.lines().skip(1).filter(|l| l.starts_with(&format!("{branch},"))) {
                        body.push_str(line);
                        body.push('\n');
                    }
                    write(&out.join(format!("traj_{name}_t{t:.1}_{mode}_{branch}.csv")), body)?;
                }
                let diff = scorer.with(&spec, &x0, |m| {
                    detect::score_diff_metric(m, &pair.x_whole, &pair.x_self, pair.t)
                })?;
                let mode_idx = mixture.nearest_mode(pair.x_whole.data());
                let mu = Tensor::vector(mixture.components()[mode_idx].mean.clone());
                let dist = |a: &Tensor, b: &Tensor| a.zip_map(b, |u, v| u - v).map(|d| d.norm());
                summary.push_str(&format!(
                    "{name},{label},{t:.1},{mode},{:?},{:?},{:?},{:?}\n",
                    diff.max(),
                    dist(&pair.x_whole, &x0)?,
                    dist(&pair.x_self, &x0)?,
                    dist(&pair.x_whole, &mu)?,
                ));
            }
        }
    }
    write(&out.join("summary.csv"), summary)
}
