use std::fs;
use std::path::Path;
use std::process::Command;

use wsrm_cli::commands::{cmd_eval, cmd_gen, cmd_oracle, cmd_pf, cmd_train, TrainOptions};
use wsrm_cli::config::SweepSpec;
use wsrm_cli::ExperimentConfig;
use wsrm_core::checkpoint::Checkpoint;
use wsrm_core::oracle::FamilyKind;
use wsrm_core::pf::{normalized_wsr, Policy, SweepAxis};

fn small_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = dir.to_path_buf();
    cfg.data.n = 4;
    cfg.data.k = 3;
    cfg.data.heldout_samples = 16;
    cfg.train.num_samples = 64;
    cfg.train.batch_size = 16;
    cfg.train.epochs = 4;
    cfg.pf.episodes = 4;
    cfg.pf.slots = 5;
    cfg
}

#[test]
fn gen_is_idempotent_and_reuses_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let first = cmd_gen(&cfg).unwrap();
    assert_eq!(first.computed_refs, 16);
    assert_eq!(first.manifest.train_samples, 64);
    assert_eq!(first.manifest.heldout_samples, 16);
    let bytes = fs::read(first.dir.join("train.bin")).unwrap();

    let second = cmd_gen(&cfg).unwrap();
    assert_eq!(second.computed_refs, 0);
    assert_eq!(second.refs, first.refs);
    assert_eq!(fs::read(second.dir.join("train.bin")).unwrap(), bytes);
    for f in ["resolved_config.toml", "run.json", "manifest.json", "heldout.bin"] {
        assert!(second.dir.join(f).exists(), "{f}");
    }
}

#[test]
fn partial_cache_is_completed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let full = cmd_gen(&cfg).unwrap();
    let cache = dir.path().join("cache").join(&full.manifest.wmmse_cache);
    let text = fs::read_to_string(&cache).unwrap();
    let kept: Vec<&str> = text.lines().take(5).collect();
    // Simulate an interrupted write: five complete lines and a torn one.
    fs::write(&cache, format!("{}\n{{\"index\":5,\"ws", kept.join("\n"))).unwrap();
    let resumed = cmd_gen(&cfg).unwrap();
    assert_eq!(resumed.computed_refs, 11);
    assert_eq!(resumed.refs, full.refs);
}

#[test]
fn train_writes_history_and_a_reloadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = cmd_train(&cfg, &TrainOptions::default()).unwrap();
    let history = fs::read_to_string(out.dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + cfg.train.epochs);

    let ck = Checkpoint::load(&out.checkpoint).unwrap();
    let params = ck.net_params().unwrap();
    let data = cmd_gen(&cfg).unwrap();
    let metric = normalized_wsr(&Policy::Network { params: &params, cfg: &ck.config }, &data.heldout.samples, &data.refs).unwrap();
    let recorded = out.state.history.last().unwrap().heldout_normalized_wsr.unwrap();
    assert!((metric - recorded).abs() < 1e-9);
}

#[test]
fn interrupted_training_resumes_to_the_same_result() {
    let straight_dir = tempfile::tempdir().unwrap();
    let straight = cmd_train(&small_config(straight_dir.path()), &TrainOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let partial = cmd_train(&cfg, &TrainOptions { stop_after: Some(2) }).unwrap();
    assert_eq!(partial.state.epoch, 2);
    let resumed = cmd_train(&cfg, &TrainOptions::default()).unwrap();
    assert_eq!(resumed.state, straight.state);
    assert_eq!(
        fs::read(resumed.dir.join("history.csv")).unwrap(),
        fs::read(straight.dir.join("history.csv")).unwrap()
    );
}

#[test]
fn eval_reports_unit_score_for_the_reference_and_sweep_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.sweeps.push(SweepSpec { axis: SweepAxis::NumUes, values: vec![2.0, 3.0, 5.0], test_samples: 8, seed: 1 });
    cmd_train(&cfg, &TrainOptions::default()).unwrap();
    let m = cmd_eval(&cfg, None).unwrap();
    assert_eq!(m.heldout["wmmse"].mean, 1.0);
    assert_eq!(m.config_sha256, cfg.hash().unwrap());
    assert_eq!(m.seeds["data"], cfg.data.seed);
    let csv = fs::read_to_string(dir.path().join("eval").join("sweep_num_ues.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(m.sweeps[0].points[2].zf_mean.is_none());
}

#[test]
fn pf_writes_cdfs_for_each_policy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = cmd_pf(&cfg, None, true).unwrap();
    assert!(!out.summary.policies.contains_key("network"));
    for name in ["wsrm_wmmse", "srm_wmmse", "mrt"] {
        let cdf = fs::read_to_string(dir.path().join("pf").join(format!("cdf_{name}.csv"))).unwrap();
        assert_eq!(cdf.lines().count(), 2 + 4 * 3);
        let traces = fs::read_to_string(dir.path().join("pf").join(format!("traces_{name}.jsonl"))).unwrap();
        assert_eq!(traces.lines().count(), 4);
    }
}

#[test]
fn oracle_reports_expected_dimensions() {
    let rows = cmd_oracle(&ExperimentConfig::default()).unwrap();
    let dims: Vec<(FamilyKind, usize)> = rows.iter().map(|r| (r.family, r.dimension)).collect();
    assert_eq!(
        dims,
        vec![(FamilyKind::UnitaryLeft, 4), (FamilyKind::UnitaryAbsorb, 0), (FamilyKind::PermDiag, 15), (FamilyKind::PermPair, 4)]
    );
    assert!(rows.iter().all(|r| r.residual < 1e-8 && r.out_of_sample_residual < 1e-8));
}

#[test]
fn binary_runs_oracle_and_rejects_unknown_keys() {
    let exe = env!("CARGO_BIN_EXE_wsrm");
    let out = Command::new(exe).args(["oracle", "--json"]).output().unwrap();
    assert!(out.status.success());
    let rows: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nlearnin_rate = 0.1\n").unwrap();
    let out = Command::new(exe).arg("-c").arg(&bad).arg("gen").output().unwrap();
    assert!(!out.status.success());

    let help = Command::new(exe).arg("--help").output().unwrap();
    let text = String::from_utf8(help.stdout).unwrap();
    for sub in ["gen", "train", "eval", "pf", "oracle", "gradcheck"] {
        assert!(text.contains(sub), "{sub}");
    }
}
