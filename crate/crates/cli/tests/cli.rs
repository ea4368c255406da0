//! Command-line behavior: artifacts, exit codes and determinism.

use std::path::Path;
use std::process::{Command, Output};

use bcqforge_core::cohort::{ingest, FeatureSchema};
use bcqforge_core::experiment::pipeline::TrainSummary;
use bcqforge_core::experiment::ExperimentConfig;
use bcqforge_core::sim::generate_cohort;

const SMALL: &[&str] = &[
    "sim.patients=120",
    "pretrain.steps=5",
    "encoder.hidden=8",
    "encoder.head=[8,8]",
    "bcq.hidden=8",
    "bcq.total_iterations=200",
    "bcq.eval_stride=100",
    "bcq.target_sync=100",
    "bcq.behavior.iterations=50",
    "ope.mu_hidden=8",
    "ope.mu_training.iterations=50",
];

fn bcqforge(args: &[&str], out: &Path, sets: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bcqforge"));
    cmd.args(args).arg("--out").arg(out).env("RUST_LOG", "warn").env_remove("BCQFORGE_SEED");
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.output().expect("binary runs")
}

#[test]
fn generate_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = bcqforge(&["generate"], dir.path(), &["sim.patients=50"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["cohort.jsonl", "schema.json", "oracle.jsonl", "generate.json", "config.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let schema = FeatureSchema::load(&dir.path().join("schema.json")).unwrap();
    let back = ingest(&dir.path().join("cohort.jsonl"), &schema).unwrap();
    let cfg = ExperimentConfig::desk().with_overrides(&["sim.patients=50".into()]).unwrap();
    assert_eq!(back, generate_cohort(&cfg.sim_config()).unwrap().raw);
}

#[test]
fn invalid_prevalence_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = bcqforge(&["generate"], dir.path(), &["sim.prevalence=1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("prevalence"));
}

#[test]
fn unknown_override_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bcqforge(&["generate"], dir.path(), &["sim.no_such_field=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bcqforge(&["train"], dir.path(), SMALL).status.code(), Some(2));
    assert_eq!(bcqforge(&["simulate"], dir.path(), SMALL).status.code(), Some(2));
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        assert!(bcqforge(&["generate"], d, &["sim.patients=80"]).status.success());
    }
    for f in ["cohort.jsonl", "schema.json", "oracle.jsonl", "generate.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_env_var_overrides_config() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(bcqforge(&["generate"], a.path(), &["sim.patients=30"]).status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_bcqforge"))
        .args(["generate", "--set", "sim.patients=30", "--out"])
        .arg(b.path())
        .env("BCQFORGE_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg: ExperimentConfig = serde_json::from_slice(&std::fs::read(b.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg.seed, 7);
    assert_ne!(std::fs::read(a.path().join("cohort.jsonl")).unwrap(), std::fs::read(b.path().join("cohort.jsonl")).unwrap());
}

#[test]
fn seeds_flag_reports_mean_and_std() {
    let dir = tempfile::tempdir().unwrap();
    assert!(bcqforge(&["generate"], dir.path(), SMALL).status.success());
    let out = bcqforge(&["train", "--seeds", "3"], dir.path(), SMALL);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: TrainSummary = serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.run_seeds, vec![0, 1, 2]);
    let wis = summary.final_wis.unwrap();
    assert!(wis.mean.is_finite() && wis.std >= 0.0);
    assert!(summary.accuracy_display.unwrap().contains(" ± "));
    for k in 0..3 {
        assert!(dir.path().join(format!("seed_{k}/curve.csv")).exists());
    }
    assert!(bcqforge(&["evaluate"], dir.path(), SMALL).status.success());
}

#[test]
fn divergence_exits_3_and_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut sets = SMALL.to_vec();
    sets.extend(["bcq.optimizer=sgd", "bcq.learning_rate=1e300"]);
    assert!(bcqforge(&["generate"], dir.path(), &sets).status.success());
    let out = bcqforge(&["train"], dir.path(), &sets);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("bundle_last_good.json").exists());
}

#[test]
fn changed_config_refuses_old_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    assert!(bcqforge(&["generate"], dir.path(), SMALL).status.success());
    let mut sets = SMALL.to_vec();
    sets.push("bcq.tau=0.2");
    let out = bcqforge(&["train"], dir.path(), &sets);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config hash"));
}

#[test]
fn shipped_configs_match_builtin_profiles() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    assert_eq!(ExperimentConfig::load(&dir.join("desk.json")).unwrap(), ExperimentConfig::desk());
    assert_eq!(ExperimentConfig::load(&dir.join("full.json")).unwrap(), ExperimentConfig::full());
}
