use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = "sde.kind = ve\nsde.sigma_min = 0.1\nsde.sigma_max = 20\nsde.steps = 100\n\
                   data.kind = toy\ndata.n_train = 500\ndata.n_test = 10\n\
                   net.hidden = 16\ntrain.steps = 20\ntrain.batch = 16\n";

fn sdd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdd")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn setup(dir: &Path) -> (String, String) {
    let cfg = dir.join("toy.cfg");
    std::fs::write(&cfg, TOY).unwrap();
    let cfg = cfg.display().to_string();
    let run = dir.join("run").display().to_string();
    let out = sdd(&["train", "-c", &cfg, "-o", &run]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (cfg, format!("{run}/model.ckpt"))
}

#[test]
fn config_errors_exit_1_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, TOY.replace("sde.kind = ve\n", "")).unwrap();
    let out = sdd(&["train", "-c", cfg.to_str().unwrap(), "-o", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sde.kind"));

    std::fs::write(&cfg, format!("{TOY}train.stpes = 3\n")).unwrap();
    let out = sdd(&["train", "-c", cfg.to_str().unwrap(), "-o", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.stpes"));

    let out = sdd(&[
        "detect",
        "-c",
        cfg.to_str().unwrap(),
        "--checkpoint",
        "/no/such.ckpt",
        "-o",
        "x",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn divergence_exits_2_and_io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.cfg");
    std::fs::write(&cfg, TOY).unwrap();
    let out_dir = dir.path().join("o");
    let out = sdd(&[
        "train",
        "-c",
        cfg.to_str().unwrap(),
        "--set",
        "train.lr=1e200",
        "-o",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"SDDM\x01\x00").unwrap();
    let out = sdd(&[
        "detect",
        "-c",
        cfg.to_str().unwrap(),
        "--checkpoint",
        junk.to_str().unwrap(),
        "-o",
        "x",
    ]);
    assert_eq!(code(&out), 3);
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = sdd(&[
        "detect",
        "-c",
        cfg.to_str().unwrap(),
        "--checkpoint",
        junk.to_str().unwrap(),
        "-o",
        "x",
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn checkpoint_mismatch_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = setup(dir.path());
    let out = sdd(&[
        "detect",
        "-c",
        &cfg,
        "--checkpoint",
        &ckpt,
        "--set",
        "net.arch=conv",
        "-o",
        "x",
    ]);
    assert_eq!(code(&out), 1);
    let out = sdd(&[
        "detect",
        "-c",
        &cfg,
        "--checkpoint",
        &ckpt,
        "--set",
        "sde.sigma_max=30",
        "-o",
        "x",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn zero_samples_give_empty_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = setup(dir.path());
    let out_dir = dir.path().join("s");
    let out = sdd(&[
        "sample",
        "-c",
        &cfg,
        "--checkpoint",
        &ckpt,
        "--n",
        "0",
        "-o",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(
        std::fs::read_to_string(out_dir.join("samples.csv")).unwrap(),
        "index,coord0,coord1\n"
    );
    let (t, _) = sdd_core::data::read_tensor(out_dir.join("samples.sdd")).unwrap();
    assert_eq!(t.shape(), &[0, 2]);
}

#[test]
fn oracle_stub_maps_are_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = setup(dir.path());
    let out_dir = dir.path().join("d");
    for sampler in ["ode", "sde"] {
        let out = sdd(&[
            "detect",
            "-c",
            &cfg,
            "--oracle-stub",
            "--set",
            &format!("detect.mode={sampler}"),
            "-o",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0);
        let scores = std::fs::read_to_string(out_dir.join("scores.csv")).unwrap();
        assert!(
            scores.lines().skip(1).all(|l| l.split(',').nth(2) == Some("0.0")),
            "{scores}"
        );
    }
    // All maps tie, so the AUROC is exactly one half.
    let results = dir.path().join("r.csv");
    let out = sdd(&[
        "eval",
        "--run",
        out_dir.to_str().unwrap(),
        "-o",
        results.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    assert!(std::fs::read_to_string(&results).unwrap().contains(",0.500000,"));
}

#[test]
fn combine_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = setup(dir.path());
    let out_dir = dir.path().join("d");
    let out = sdd(&[
        "detect",
        "-c",
        &cfg,
        "--checkpoint",
        &ckpt,
        "--combine",
        "recon_loss",
        "-o",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let run = std::fs::read_to_string(out_dir.join("run.txt")).unwrap();
    assert!(run.contains("config_id=T5r1-ode-recon_loss"), "{run}");
    // Reconstruction skips the end-state evaluations: 5 scales x 1 step.
    assert!(run.contains("total_nfe=100"), "{run}");
}
