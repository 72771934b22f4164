use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drdc::pipeline::RunConfig;
use drdc::synthdata::PatternKind;

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::toy();
    cfg.output_dir = dir.join("run");
    let syn = &mut cfg.dataset.synthetic;
    syn.categories = vec![PatternKind::Checker, PatternKind::FilteredNoise];
    syn.image_shape = [32, 32, 3];
    syn.train_per_category = 4;
    syn.test_normal_per_category = 2;
    syn.test_anomalous_per_category = 2;
    syn.grid_sizes = vec![1, 8];
    cfg.features.target_grid = (4, 4);
    cfg.base.model.encoder_layers = 1;
    cfg.base.model.decoder_layers = 1;
    cfg.base.train.epochs = 1;
    cfg.diffusion.unet.base_width = 8;
    cfg.diffusion.train.steps = 2;
    cfg.diffusion.train.batch_size = 2;
    cfg.diffusion.train.crop = Some(16);
    cfg.inference.grid_sizes = vec![1, 8];
    cfg.inference.timesteps = vec![60, 0];
    cfg.inference.smoothing = Some(3);
    cfg.inference.pool = Some(2);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn drdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drdc")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn generate_then_missing_checkpoints_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let o = drdc(&["generate", "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("run/data/manifest.json").exists());
    assert!(!dir.path().join("run/checkpoints").exists());

    let o = drdc(&["infer", "--config", cfg]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("extractor.ckpt"));
}

#[test]
fn invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"inference": {"grid_sizes": [3]}}"#).unwrap();
    assert_eq!(code(&drdc(&["all", "--config", bad.to_str().unwrap()])), 2);
    std::fs::write(&bad, r#"{"sede": 1}"#).unwrap();
    assert_eq!(code(&drdc(&["generate", "--config", bad.to_str().unwrap()])), 2);
    let cfg = tiny_config(dir.path());
    assert_eq!(code(&drdc(&["all", "--config", cfg.to_str().unwrap(), "--stages", "data,nope"])), 2);
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&drdc(&["generate", "--config", missing.to_str().unwrap()])), 3);
}

#[test]
fn all_stages_with_overrides_then_report_and_table1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("elsewhere");
    let out_s = out.to_str().unwrap();
    let o = drdc(&["all", "--config", cfg, "--out", out_s, "--seed", "11"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("image AUROC"));
    assert!(out.join("metrics/metrics.json").exists());
    assert!(!dir.path().join("run").exists());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);

    let o = drdc(&["report", "--config", cfg, "--out", out_s, "--samples", "checker_test_good_0000,filtered-noise_test_good_0001"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("plots/checker_test_good_0000_panel.png").exists());

    let o = drdc(&["table1", "--config", cfg, "--out", out_s]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 5);
    assert!(out.join("metrics/table1.csv").exists());
}
