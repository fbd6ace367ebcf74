use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mrcom::meta_env::ScenarioSet;
use mrcom::numerics::checkpoint;
use mrcom_cli::commands::{scenario_file, target_file, BOUNDS_FILE};
use mrcom_cli::config::{Command as Cmd, RunConfig, CONFIG_FILE};
use mrcom_cli::report::{metric_files, read_metrics, Summary, SUMMARY_JSON};

fn mrcom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrcom"))
        .args(args)
        .env_remove("MRCOM_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mrcom(args);
    assert!(
        out.status.success(),
        "mrcom {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn summary(dir: &Path) -> Summary {
    serde_json::from_slice(&std::fs::read(dir.join(SUMMARY_JSON)).unwrap()).unwrap()
}

fn train_tiny(dir: &Path, seeds: &str) -> String {
    ok(&["train", "--preset", "tiny", "--morphologies", "hop,walk", "--seeds", seeds, "--output", path(dir)])
}

/// Mean and sample std recomputed from scratch.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 { xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, v.sqrt())
}

#[test]
fn train_writes_one_metric_file_per_seed_and_a_recomputable_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("train");
    let stdout = train_tiny(&dir, "2");
    assert!(stdout.contains("| full |"), "{stdout}");
    let files = metric_files(&dir);
    assert_eq!(files.len(), 2);
    let mut finals = Vec::new();
    for f in &files {
        let recs = read_metrics(f).unwrap();
        finals.push(recs.iter().rev().find(|r| r.metrics.phase == "train").unwrap().metrics.loss_total.unwrap());
    }
    let s = summary(&dir);
    assert_eq!(s.rows.len(), 1);
    let col = s.columns.iter().position(|c| c == "loss_total").unwrap();
    let cell = s.rows[0].cells[col].unwrap();
    let (m, sd) = mean_std(&finals);
    assert!((cell.mean - m).abs() <= 1e-9 && (cell.std - sd).abs() <= 1e-9);
    for seed in 0..2 {
        assert!(dir.join("checkpoints").join(format!("seed{seed}")).join(checkpoint::MANIFEST_FILE).exists());
        assert!(scenario_file(&dir, seed).exists());
    }
}

#[test]
fn echoed_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    train_tiny(&a, "1");
    let echoed = RunConfig::load(Cmd::Train, None, &a.join(CONFIG_FILE)).unwrap();
    assert_eq!(echoed.seeds, vec![0]);
    let b = tmp.path().join("b");
    ok(&["train", "--config", path(&a.join(CONFIG_FILE)), "--output", path(&b)]);
    let strip = |dir: &Path| -> Vec<String> {
        read_metrics(&metric_files(dir)[0])
            .unwrap()
            .into_iter()
            .map(|mut r| {
                r.metrics.wall_time = 0.0;
                serde_json::to_string(&r).unwrap()
            })
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
    let blob = |d: &Path| std::fs::read(d.join("checkpoints/seed0").join(checkpoint::BLOB_FILE)).unwrap();
    assert_eq!(blob(&a), blob(&b));
}

#[test]
fn adapt_from_a_training_run_uses_disjoint_ood_targets() {
    let tmp = tempfile::tempdir().unwrap();
    let train = tmp.path().join("train");
    train_tiny(&train, "1");
    let dir = tmp.path().join("adapt");
    let stdout = ok(&[
        "adapt", "--preset", "tiny", "--from", path(&train), "--ood", "--alpha-eval", "20", "--beta-eval", "100", "--output", path(&dir),
    ]);
    assert!(stdout.contains("in_distribution") && stdout.contains("ood"), "{stdout}");
    let training = ScenarioSet::from_text(&std::fs::read_to_string(scenario_file(&train, 0)).unwrap()).unwrap();
    let targets = ScenarioSet::from_text(&std::fs::read_to_string(target_file(&dir, 0)).unwrap()).unwrap();
    assert_eq!(targets.len(), 2);
    for t in &targets.scenarios {
        assert!(training.scenarios.iter().all(|s| s.id != t.id && *s != *t));
    }
    assert_ne!(targets.scenarios[0], targets.scenarios[1]);
    let s = summary(&dir);
    assert_eq!(s.columns, vec!["in_distribution", "ood"]);
    assert!(s.rows[0].cells.iter().all(|c| c.is_some()));
}

#[test]
fn eval_of_an_untrained_agent_scores_near_the_random_anchor() {
    let tmp = tempfile::tempdir().unwrap();
    let adapt = tmp.path().join("adapt");
    ok(&["adapt", "--preset", "tiny", "--morphologies", "hop", "--adapt-steps", "0", "--output", path(&adapt)]);
    let dir = tmp.path().join("eval");
    ok(&["eval", "--preset", "tiny", "--from", path(&adapt), "--output", path(&dir)]);
    let s = summary(&dir);
    let cell = s.rows[0].cells[0].unwrap();
    assert!(cell.mean <= 15.0, "untrained agent scored {}", cell.mean);
}

#[test]
fn ablate_has_five_rows_on_shared_scenarios() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ablate");
    ok(&["ablate", "--preset", "tiny", "--morphologies", "hop", "--adapt-steps", "20", "--output", path(&dir)]);
    let s = summary(&dir);
    let rows: Vec<&str> = s.rows.iter().map(|r| r.group.as_str()).collect();
    assert_eq!(rows, vec!["full", "wo_d", "wo_c", "wo_ls", "wo_lv"]);
    assert!(s.rows.iter().all(|r| r.cells[0].is_some()));
    let files = metric_files(&dir);
    assert_eq!(files.len(), 5);
    let mut ids: Vec<Vec<Option<usize>>> = Vec::new();
    for f in files {
        let recs = read_metrics(&f).unwrap();
        ids.push(recs.iter().filter(|r| r.metrics.phase == "eval").map(|r| r.metrics.scenario_id).collect());
    }
    assert!(ids.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn dataset_modes_table_is_modes_by_morphologies() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("modes");
    ok(&["dataset-modes", "--preset", "tiny", "--morphologies", "hop,walk", "--adapt-steps", "20", "--output", path(&dir)]);
    let s = summary(&dir);
    assert_eq!(s.columns, vec!["hop", "walk"]);
    let rows: Vec<&str> = s.rows.iter().map(|r| r.group.as_str()).collect();
    assert_eq!(rows, vec!["expert", "medium", "mix", "random"]);
    assert!(s.rows.iter().all(|r| r.cells.iter().all(|c| c.is_some())));
    let recs: Vec<_> = metric_files(&dir).iter().flat_map(|f| read_metrics(f).unwrap()).collect();
    let mut by_cell: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in recs.iter().filter(|r| r.metrics.phase == "eval") {
        by_cell.entry((r.group.clone(), r.split.clone().unwrap())).or_default().push(r.metrics.normalized_return.unwrap());
    }
    for row in &s.rows {
        for (c, cell) in s.columns.iter().zip(&row.cells) {
            let (m, _) = mean_std(&by_cell[&(row.group.clone(), c.clone())]);
            assert!((cell.unwrap().mean - m).abs() <= 1e-9);
        }
    }
}

#[test]
fn verify_bounds_with_zero_trials_is_empty_and_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("vb");
    ok(&["verify-bounds", "--trials", "0", "--output", path(&dir)]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join(BOUNDS_FILE)).unwrap()).unwrap();
    assert_eq!(report["performance"]["trials"], 0);
    assert_eq!(report["marginal"]["kl_premise"]["trials"], 0);
}

#[test]
fn verify_bounds_bytes_are_fixed_by_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let read = |name: &str| {
        let dir = tmp.path().join(name);
        mrcom(&["verify-bounds", "--trials", "20", "--seed-list", "4", "--output", path(&dir)]);
        std::fs::read(dir.join(BOUNDS_FILE)).unwrap()
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn default_bounds_report_fails_only_on_the_kl_marginal_premise() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("vb");
    let start = std::time::Instant::now();
    let out = mrcom(&["verify-bounds", "--output", path(&dir)]);
    assert!(start.elapsed().as_secs() < 60);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join(BOUNDS_FILE)).unwrap()).unwrap();
    assert_eq!(report["performance"]["violations"], 0);
    assert_eq!(report["marginal"]["tv_premise"]["violations"], 0);
    assert_eq!(report["representation"]["dynamics"]["violations"], 0);
    assert_eq!(report["representation"]["policy"]["violations"], 0);
    let kl = report["marginal"]["kl_premise"]["violations"].as_u64().unwrap();
    assert_eq!(out.status.code(), Some(if kl > 0 { 1 } else { 0 }));
}

#[test]
fn plot_renders_a_training_run_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("train");
    train_tiny(&dir, "1");
    ok(&["plot", path(&dir)]);
    let svgs: Vec<PathBuf> = std::fs::read_dir(dir.join("plots")).unwrap().flatten().map(|e| e.path()).collect();
    assert!(svgs.len() >= 2);
    let before: Vec<Vec<u8>> = svgs.iter().map(|p| std::fs::read(p).unwrap()).collect();
    ok(&["plot", path(&dir)]);
    let after: Vec<Vec<u8>> = svgs.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn plot_of_an_empty_directory_lists_what_it_expected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mrcom(&["plot", path(tmp.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("metrics/<group>-seed<N>.jsonl"), "{err}");
}

#[test]
fn invalid_configs_fail_with_the_field_name() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nbatch = 0\n").unwrap();
    let out = mrcom(&["train", "--config", path(&cfg), "--output", path(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch"));
    std::fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    let out = mrcom(&["train", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("width"));
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mrcom"))
        .args(["verify-bounds", "--trials", "0"])
        .env("MRCOM_OUTPUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("verify-bounds").join(BOUNDS_FILE).exists());
}
