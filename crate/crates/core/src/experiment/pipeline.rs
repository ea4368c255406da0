//! Command pipelines behind the CLI subcommands.
//!
//! Each command reads and writes files in one output directory. JSON reports
//! and checkpoints carry the config hash; reading an artifact written under a
//! different hash is a configuration error. Files supplied through
//! `paths.*` are external and carry no hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ExperimentConfig, RunConfig};
use crate::bcq::{train_q, write_curve_csv, BcqConfig, CurvePoint, EvalPoint, PolicyBundle, QTrainer};
use crate::cohort::{self, build_buffer, build_buffer_for, Cohort, FeatureSchema, RawCohort, ReplayBuffer, Split};
use crate::encoders::{pretrain_encoder, Encoder, EncoderConfig, FeatureEncoder, PretrainReport, StateEncoder};
use crate::error::{Error, Result};
use crate::nn::{derive_seed, parameter_hash, Checkpoint};
use crate::ope::baselines::{majority_rate, search_lr, search_mlp, BaselineResult, LabeledSteps};
use crate::ope::{
    train_behavior_policy, trajectories_from_buffer, wis, BehaviorPolicy, EvaluationReport, MeanStd, PolicyEvaluator,
};
use crate::sim::{generate_cohort, policy_simulation, sim_schema, write_oracle_labels, OutcomeVariant, PolicySimReport};
use crate::transfer::{add_feature_noise, init_learner, paired_target_sim, summarize, transfer_metrics, TransferMetrics, TransferMode};

pub const COHORT_FILE: &str = "cohort.jsonl";
pub const SCHEMA_FILE: &str = "schema.json";
pub const ORACLE_FILE: &str = "oracle.jsonl";
pub const GENERATE_FILE: &str = "generate.json";
pub const PROCESSED_FILE: &str = "processed.json";
pub const ENCODER_FILE: &str = "encoder.json";
pub const PRETRAIN_FILE: &str = "pretrain.json";
pub const BUNDLE_FILE: &str = "bundle.json";
pub const LAST_GOOD_FILE: &str = "bundle_last_good.json";
pub const MU_FILE: &str = "mu.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const TRANSFER_DIR: &str = "transfer";
pub const TRANSFER_REPORT_FILE: &str = "transfer_report.json";
pub const SIMULATION_FILE: &str = "simulation.json";
pub const BASELINES_FILE: &str = "baselines.json";
pub const CONFIG_FILE: &str = "config.json";

const HASH_KEY: &str = "config_hash";

/// A validated config bound to an output directory.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
}

impl Context {
    /// Validate `config`, create `out` and write the resolved config there.
    pub fn new(config: ExperimentConfig, out: &Path) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let hash = config.hash()?;
        let ctx = Self { config, hash, out: out.to_path_buf() };
        write_json(&ctx.out.join(CONFIG_FILE), &ctx.config)?;
        Ok(ctx)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Directory of run `k` out of `seeds`.
    pub fn run_dir(&self, k: usize, seeds: usize) -> PathBuf {
        if seeds <= 1 {
            self.out.clone()
        } else {
            self.out.join(format!("seed_{k}"))
        }
    }

    /// Directory holding the trained bundle that later commands use: the
    /// output directory itself, or the first seed of a sweep.
    pub fn primary_run_dir(&self) -> Result<PathBuf> {
        for dir in [self.out.clone(), self.out.join("seed_0")] {
            if dir.join(BUNDLE_FILE).exists() {
                return Ok(dir);
            }
        }
        Err(Error::input(format!("no trained bundle under {}; run `train` first", self.out.display())))
    }

    /// How reports name an artifact: relative to the output directory when
    /// it lives there, so reports do not depend on where the run was made.
    pub fn artifact_name(&self, path: &Path) -> String {
        path.strip_prefix(&self.out).unwrap_or(path).display().to_string()
    }
}

// ----------------------------------------------------------------------------
// Artifact I/O
// ----------------------------------------------------------------------------

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn check_hash(found: Option<&str>, expected: &str, path: &Path) -> Result<()> {
    match found {
        Some(h) if h != expected => Err(Error::config(format!(
            "{} was written under config hash {h}, the current config hashes to {expected}",
            path.display()
        ))),
        _ => Ok(()),
    }
}

fn check_report_hash(path: &Path, expected: &str) -> Result<()> {
    let v: Value = read_json(path)?;
    check_hash(v.get(HASH_KEY).and_then(Value::as_str), expected, path)
}

fn save_checkpoint(mut ck: Checkpoint, hash: &str, path: &Path) -> Result<()> {
    ck.metadata.insert(HASH_KEY.into(), Value::String(hash.into()));
    ck.save(path)
}

fn load_checkpoint(path: &Path, hash: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::input(format!("missing checkpoint {}", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    check_hash(ck.metadata.get(HASH_KEY).and_then(Value::as_str), hash, path)?;
    Ok(ck)
}

// ----------------------------------------------------------------------------
// generate / preprocess
// ----------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub config_hash: String,
    pub patients: usize,
    pub transfusion_prevalence: f64,
    pub observed_mortality: f64,
    pub files: Vec<String>,
}

/// Simulate a cohort and write it with its schema and oracle labels.
pub fn generate(ctx: &Context) -> Result<GenerateSummary> {
    let sim = generate_cohort(&ctx.config.sim_config())?;
    cohort::raw::save(&sim.raw, &ctx.path(COHORT_FILE))?;
    sim.raw.schema.save(&ctx.path(SCHEMA_FILE))?;
    write_oracle_labels(&sim.oracle, &ctx.path(ORACLE_FILE))?;
    let summary = GenerateSummary {
        config_hash: ctx.hash.clone(),
        patients: sim.raw.patients.len(),
        transfusion_prevalence: sim.transfusion_prevalence(),
        observed_mortality: sim.observed_mortality(),
        files: [COHORT_FILE, SCHEMA_FILE, ORACLE_FILE].map(String::from).to_vec(),
    };
    write_json(&ctx.path(GENERATE_FILE), &summary)?;
    Ok(summary)
}

fn load_schema(path: Option<&Path>) -> Result<FeatureSchema> {
    match path {
        Some(p) => FeatureSchema::load(p),
        None => Ok(sim_schema()),
    }
}

/// The raw cohort named by `paths.cohort`, or the one `generate` wrote.
pub fn load_raw(ctx: &Context) -> Result<RawCohort> {
    let paths = &ctx.config.paths;
    if let Some(p) = &paths.cohort {
        return cohort::ingest(p, &load_schema(paths.schema.as_deref())?);
    }
    let path = ctx.path(COHORT_FILE);
    if !path.exists() {
        return Err(Error::input(format!("no cohort at {}; run `generate` first or set paths.cohort", path.display())));
    }
    let marker = ctx.path(GENERATE_FILE);
    if marker.exists() {
        check_report_hash(&marker, &ctx.hash)?;
    }
    let schema_path = ctx.path(SCHEMA_FILE);
    let schema = if schema_path.exists() { FeatureSchema::load(&schema_path)? } else { load_schema(paths.schema.as_deref())? };
    cohort::ingest(&path, &schema)
}

/// Bin, impute, split and normalize; writes `processed.json`.
pub fn preprocess(ctx: &Context) -> Result<Cohort> {
    let raw = load_raw(ctx)?;
    let cohort = cohort::preprocess(&raw, ctx.config.split_seed())?;
    cohort.save(&ctx.path(PROCESSED_FILE), Some(&ctx.hash))?;
    Ok(cohort)
}

/// `processed.json` when present (hash-checked), otherwise a fresh
/// preprocessing pass.
pub fn processed_cohort(ctx: &Context) -> Result<Cohort> {
    let path = ctx.path(PROCESSED_FILE);
    if !path.exists() {
        return preprocess(ctx);
    }
    let (cohort, hash) = Cohort::load(&path)?;
    check_hash(hash.as_deref(), &ctx.hash, &path)?;
    Ok(cohort)
}

/// Trajectories of `splits`, in cohort order, as a cohort of their own.
pub fn subset(cohort: &Cohort, splits: &[Split]) -> Cohort {
    let keep: Vec<usize> = (0..cohort.trajectories.len()).filter(|&i| splits.contains(&cohort.splits[i])).collect();
    Cohort {
        schema: cohort.schema.clone(),
        trajectories: keep.iter().map(|&i| cohort.trajectories[i].clone()).collect(),
        splits: keep.iter().map(|&i| cohort.splits[i]).collect(),
        stats: cohort.stats.clone(),
    }
}

// ----------------------------------------------------------------------------
// train
// ----------------------------------------------------------------------------

/// Everything a BCQ run needs from one cohort: a pretrained encoder, train and
/// test buffers, μ and the evaluator built on them.
pub struct Task {
    pub encoder: Encoder,
    pub pretrain: PretrainReport,
    pub train: ReplayBuffer,
    pub test: ReplayBuffer,
    pub mu: BehaviorPolicy,
    pub evaluator: PolicyEvaluator,
}

pub fn prepare_task(config: &ExperimentConfig, cohort: &Cohort, encoder_config: &EncoderConfig, run: &RunConfig) -> Result<Task> {
    let mut encoder = Encoder::new(encoder_config.clone(), cohort.feature_width())?;
    log::info!("pretraining {} encoder ({} steps)", encoder_config.kind.name(), config.pretrain.steps);
    let pretrain = pretrain_encoder(&mut encoder, &cohort.split_trajectories(Split::Train), &config.pretrain, run.pretrain_seed)?;
    let train = build_buffer(cohort, &encoder, &config.reward)?;
    let test = build_buffer_for(cohort, &cohort.indices(Split::Test), &encoder, &config.reward)?;
    log::info!("buffers: {} train / {} test transitions", train.len(), test.len());
    let mu = train_behavior_policy(&train, &config.ope, run.mu_seed)?;
    let evaluator = PolicyEvaluator::new(trajectories_from_buffer(&test), &mu, config.return_gamma(), config.ope.epsilon)?;
    Ok(Task { encoder, pretrain, train, test, mu, evaluator })
}

/// Train with WIS and accuracy recorded at every evaluation point.
pub fn train_with_eval(
    trainer: QTrainer<'_>,
    evaluator: &PolicyEvaluator,
    abort_checkpoint: Option<&Path>,
) -> Result<(PolicyBundle, Vec<CurvePoint>)> {
    train_q(
        trainer,
        |b| {
            let e = evaluator.evaluate(b)?;
            Ok(EvalPoint { wis: Some(e.wis.estimate), accuracy: Some(e.accuracy) })
        },
        abort_checkpoint,
    )
}

fn final_report(ctx: &Context, seed: u64, evaluator: &PolicyEvaluator, bundle: &PolicyBundle, points: Vec<CurvePoint>) -> Result<EvaluationReport> {
    let e = evaluator.evaluate(bundle)?;
    let report = EvaluationReport {
        seed,
        config_hash: ctx.hash.clone(),
        points,
        final_wis: Some(e.wis.estimate),
        final_accuracy: Some(e.accuracy),
        final_ess: Some(e.wis.effective_sample_size),
        final_clip_events: Some(e.wis.clipped_low + e.wis.clipped_high),
        return_gamma: ctx.config.return_gamma(),
        epsilon: ctx.config.ope.epsilon,
    };
    report.validate()?;
    Ok(report)
}

/// One seeded training run written into `dir`.
pub fn train_run(ctx: &Context, cohort: &Cohort, run: &RunConfig, dir: &Path) -> Result<EvaluationReport> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let task = prepare_task(&ctx.config, cohort, &run.encoder, run)?;
    save_checkpoint(task.encoder.checkpoint()?, &ctx.hash, &dir.join(ENCODER_FILE))?;
    write_json(&dir.join(PRETRAIN_FILE), &task.pretrain)?;
    save_checkpoint(task.mu.checkpoint()?, &ctx.hash, &dir.join(MU_FILE))?;

    let mut bundle = PolicyBundle::new(run.bcq.clone(), task.encoder.width())?;
    bundle.encoder_hash = Some(parameter_hash(&task.encoder));
    bundle.fit_behavior(&task.train)?;
    log::info!("training BCQ for {} iterations (run seed {})", run.bcq.total_iterations, run.run_seed);
    let trainer = QTrainer::new(bundle, &task.train)?;
    let (bundle, curve) = train_with_eval(trainer, &task.evaluator, Some(&dir.join(LAST_GOOD_FILE)))?;

    save_checkpoint(bundle.checkpoint()?, &ctx.hash, &dir.join(BUNDLE_FILE))?;
    write_curve_csv(&dir.join(CURVE_FILE), &curve)?;
    let report = final_report(ctx, run.run_seed, &task.evaluator, &bundle, curve)?;
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Mean ± std of the final metrics across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub run_seeds: Vec<u64>,
    pub final_wis: Option<MeanStd>,
    pub final_accuracy: Option<MeanStd>,
    /// `final_wis` rendered as `mean ± std`.
    pub wis_display: Option<String>,
    pub accuracy_display: Option<String>,
}

impl TrainSummary {
    pub fn from_reports(config_hash: &str, reports: &[EvaluationReport]) -> Self {
        let collect = |f: fn(&EvaluationReport) -> Option<f64>| -> Option<MeanStd> {
            let vals: Option<Vec<f64>> = reports.iter().map(f).collect();
            vals.and_then(|v| MeanStd::of(&v))
        };
        let final_wis = collect(|r| r.final_wis);
        let final_accuracy = collect(|r| r.final_accuracy);
        Self {
            config_hash: config_hash.to_string(),
            run_seeds: reports.iter().map(|r| r.seed).collect(),
            final_wis,
            final_accuracy,
            wis_display: final_wis.map(|m| m.to_string()),
            accuracy_display: final_accuracy.map(|m| m.to_string()),
        }
    }
}

/// `seeds` training runs with run seeds `seed, seed + 1, ...`.
pub fn train(ctx: &Context, seeds: usize) -> Result<(Vec<EvaluationReport>, TrainSummary)> {
    if seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()));
    }
    let cohort = processed_cohort(ctx)?;
    let mut reports = Vec::with_capacity(seeds);
    for k in 0..seeds {
        let run = ctx.config.run(ctx.config.seed.wrapping_add(k as u64));
        reports.push(train_run(ctx, &cohort, &run, &ctx.run_dir(k, seeds))?);
    }
    let summary = TrainSummary::from_reports(&ctx.hash, &reports);
    write_json(&ctx.path(SUMMARY_FILE), &summary)?;
    Ok((reports, summary))
}

// ----------------------------------------------------------------------------
// evaluate
// ----------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub config_hash: String,
    pub test_trajectories: usize,
    pub wis: f64,
    /// WIS with undiscounted returns.
    pub wis_undiscounted: f64,
    pub effective_sample_size: f64,
    pub clipped_low: usize,
    pub clipped_high: usize,
    pub mu_floored: usize,
    pub accuracy: f64,
    pub return_gamma: f64,
    pub epsilon: f64,
}

/// Trained encoder, bundle and μ loaded from a run directory, with the
/// bundle checked against the encoder it was trained on.
pub fn load_run(ctx: &Context, dir: &Path) -> Result<(Encoder, PolicyBundle, BehaviorPolicy)> {
    let encoder = Encoder::from_checkpoint(&load_checkpoint(&dir.join(ENCODER_FILE), &ctx.hash)?)?;
    let bundle = PolicyBundle::from_checkpoint(&load_checkpoint(&dir.join(BUNDLE_FILE), &ctx.hash)?)?;
    let mu = BehaviorPolicy::from_checkpoint(&load_checkpoint(&dir.join(MU_FILE), &ctx.hash)?)?;
    check_encoder(&encoder, &bundle)?;
    Ok((encoder, bundle, mu))
}

fn check_encoder(encoder: &Encoder, bundle: &PolicyBundle) -> Result<()> {
    if let Some(h) = &bundle.encoder_hash {
        if *h != parameter_hash(encoder) {
            return Err(Error::config("policy bundle was trained on a different encoder"));
        }
    }
    if bundle.state_dim() != encoder.width() {
        return Err(Error::config(format!(
            "policy bundle expects {}-wide states, encoder produces {}",
            bundle.state_dim(),
            encoder.width()
        )));
    }
    Ok(())
}

/// Re-evaluate the trained policy on the test split.
pub fn evaluate(ctx: &Context) -> Result<EvaluationSummary> {
    let cohort = processed_cohort(ctx)?;
    let dir = ctx.primary_run_dir()?;
    let (encoder, bundle, mu) = load_run(ctx, &dir)?;
    let test = build_buffer_for(&cohort, &cohort.indices(Split::Test), &encoder, &ctx.config.reward)?;
    let gamma = ctx.config.return_gamma();
    let eps = ctx.config.ope.epsilon;
    let evaluator = PolicyEvaluator::new(trajectories_from_buffer(&test), &mu, gamma, eps)?;
    let e = evaluator.evaluate(&bundle)?;
    let greedy = evaluator.greedy(&bundle)?;
    let mu_probs: Vec<Vec<Vec<f64>>> =
        evaluator.trajectories().iter().map(|t| mu.probs_rows(&t.states)).collect::<Result<_>>()?;
    let undiscounted = wis(evaluator.trajectories(), &greedy, &mu_probs, 1.0, eps)?;
    let summary = EvaluationSummary {
        config_hash: ctx.hash.clone(),
        test_trajectories: evaluator.trajectories().len(),
        wis: e.wis.estimate,
        wis_undiscounted: undiscounted.estimate,
        effective_sample_size: e.wis.effective_sample_size,
        clipped_low: e.wis.clipped_low,
        clipped_high: e.wis.clipped_high,
        mu_floored: e.wis.mu_floored,
        accuracy: e.accuracy,
        return_gamma: gamma,
        epsilon: eps,
    };
    write_json(&dir.join(EVALUATION_FILE), &summary)?;
    Ok(summary)
}

// ----------------------------------------------------------------------------
// transfer
// ----------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferModeResult {
    pub mode: TransferMode,
    pub metrics: TransferMetrics,
    pub final_wis: Option<f64>,
    pub final_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub config_hash: String,
    pub expert: String,
    pub target_trajectories: usize,
    pub iterations: usize,
    pub scratch_final_wis: Option<f64>,
    pub scratch_final_accuracy: Option<f64>,
    pub modes: Vec<TransferModeResult>,
    /// Best percentage deltas across modes.
    pub summary: String,
}

/// Curves and bundles of one transfer experiment, kept in memory.
pub struct TransferOutcome {
    pub report: TransferReport,
    pub scratch_curve: Vec<CurvePoint>,
    pub curves: Vec<(TransferMode, Vec<CurvePoint>)>,
}

fn load_expert(ctx: &Context) -> Result<(PolicyBundle, String)> {
    match &ctx.config.transfer.expert_checkpoint {
        Some(p) => Ok((PolicyBundle::load(p)?, p.display().to_string())),
        None => {
            let path = ctx.primary_run_dir()?.join(BUNDLE_FILE);
            let bundle = PolicyBundle::from_checkpoint(&load_checkpoint(&path, &ctx.hash)?)?;
            Ok((bundle, ctx.artifact_name(&path)))
        }
    }
}

/// The target cohort: `paths.target_cohort` when set, otherwise the paired
/// simulator task (a smaller cohort from the same dynamics with feature
/// noise).
pub fn target_cohort(ctx: &Context, dir: &Path) -> Result<Cohort> {
    let cfg = &ctx.config;
    let split_seed = derive_seed(cfg.split_seed(), 1);
    if let Some(p) = &cfg.paths.target_cohort {
        let raw = cohort::ingest(p, &load_schema(cfg.paths.target_schema.as_deref())?)?;
        return cohort::preprocess(&raw, split_seed);
    }
    let sim = generate_cohort(&paired_target_sim(&cfg.sim_config(), cfg.transfer.target_fraction))?;
    cohort::raw::save(&sim.raw, &dir.join(COHORT_FILE))?;
    let mut target = cohort::preprocess(&sim.raw, split_seed)?;
    add_feature_noise(&mut target, cfg.transfer.target_feature_noise, derive_seed(cfg.seed, 10))?;
    Ok(target)
}

/// BCQ settings for target-task learners.
pub fn learner_config(config: &ExperimentConfig, run: &RunConfig) -> BcqConfig {
    BcqConfig { total_iterations: config.transfer_iterations.unwrap_or(run.bcq.total_iterations), ..run.bcq.clone() }
}

/// Train a scratch learner and one learner per mode on the target task.
pub fn transfer_with(ctx: &Context, expert: &PolicyBundle, expert_name: &str, modes: &[TransferMode]) -> Result<TransferOutcome> {
    let cfg = &ctx.config;
    let dir = ctx.path(TRANSFER_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let target = target_cohort(ctx, &dir)?;
    target.save(&dir.join(PROCESSED_FILE), Some(&ctx.hash))?;

    // Same encoder initialization as the source run; trained on target data.
    let run = cfg.run(cfg.seed);
    let task = prepare_task(cfg, &target, &run.encoder, &run)?;
    if task.encoder.width() != expert.state_dim() {
        return Err(Error::config(format!(
            "target encoder width {} does not match the expert's state width {}",
            task.encoder.width(),
            expert.state_dim()
        )));
    }
    save_checkpoint(task.encoder.checkpoint()?, &ctx.hash, &dir.join(ENCODER_FILE))?;
    save_checkpoint(task.mu.checkpoint()?, &ctx.hash, &dir.join(MU_FILE))?;
    let encoder_hash = Some(parameter_hash(&task.encoder));
    let learner = learner_config(cfg, &run);

    log::info!("target task: scratch learner");
    let mut scratch = PolicyBundle::new(learner.clone(), task.encoder.width())?;
    scratch.encoder_hash = encoder_hash.clone();
    scratch.fit_behavior(&task.train)?;
    let (scratch, scratch_curve) =
        train_with_eval(QTrainer::new(scratch, &task.train)?, &task.evaluator, Some(&dir.join("scratch_last_good.json")))?;
    save_checkpoint(scratch.checkpoint()?, &ctx.hash, &dir.join("scratch_bundle.json"))?;
    write_curve_csv(&dir.join("scratch_curve.csv"), &scratch_curve)?;
    let scratch_final = task.evaluator.evaluate(&scratch)?;

    let mut results = Vec::new();
    let mut curves = Vec::new();
    for &mode in modes {
        log::info!("target task: {} learner", mode.name());
        let mut bundle = init_learner(expert, &learner, task.encoder.width(), mode, &cfg.transfer.reinit_layers, run.transfer_seed)?;
        bundle.encoder_hash = encoder_hash.clone();
        // wt/wtr fine-tune the copied G on target data; qvt fits it fresh.
        bundle.fit_behavior(&task.train)?;
        let trainer = match mode {
            TransferMode::Qvt => QTrainer::with_expert(bundle, &task.train, &expert.q, cfg.transfer.qvt_weight)?,
            TransferMode::Wt | TransferMode::Wtr => QTrainer::new(bundle, &task.train)?,
        };
        let name = mode.name();
        let (bundle, curve) = train_with_eval(trainer, &task.evaluator, Some(&dir.join(format!("{name}_last_good.json"))))?;
        save_checkpoint(bundle.checkpoint()?, &ctx.hash, &dir.join(format!("{name}_bundle.json")))?;
        write_curve_csv(&dir.join(format!("{name}_curve.csv")), &curve)?;
        let fin = task.evaluator.evaluate(&bundle)?;
        results.push(TransferModeResult {
            mode,
            metrics: transfer_metrics(&scratch_curve, &curve)?,
            final_wis: Some(fin.wis.estimate),
            final_accuracy: Some(fin.accuracy),
        });
        curves.push((mode, curve));
    }

    let metrics: Vec<TransferMetrics> = results.iter().map(|r| r.metrics.clone()).collect();
    let report = TransferReport {
        config_hash: ctx.hash.clone(),
        expert: expert_name.to_string(),
        target_trajectories: target.trajectories.len(),
        iterations: learner.total_iterations,
        scratch_final_wis: Some(scratch_final.wis.estimate),
        scratch_final_accuracy: Some(scratch_final.accuracy),
        modes: results,
        summary: summarize(&metrics),
    };
    write_json(&dir.join(TRANSFER_REPORT_FILE), &report)?;
    Ok(TransferOutcome { report, scratch_curve, curves })
}

/// Transfer from the configured expert with the configured mode.
pub fn transfer(ctx: &Context) -> Result<TransferReport> {
    let (expert, name) = load_expert(ctx)?;
    Ok(transfer_with(ctx, &expert, &name, &[ctx.config.transfer.mode])?.report)
}

// ----------------------------------------------------------------------------
// simulate
// ----------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub config_hash: String,
    pub policy: String,
    pub target_trajectories: usize,
    pub source_trajectories: usize,
    pub mortality: PolicySimReport,
    pub acuity: PolicySimReport,
}

/// Recommended actions for every decision step of every trajectory.
pub fn policy_actions(cohort: &Cohort, encoder: &dyn StateEncoder, bundle: &PolicyBundle) -> Result<Vec<Vec<u8>>> {
    cohort
        .trajectories
        .iter()
        .map(|t| {
            let states = encoder.encode_trajectory(t)?;
            bundle.act_rows(&states[..t.transitions()])
        })
        .collect()
}

/// Outcome simulation: the test split is the target cohort and the train
/// and validation splits supply the controls.
pub fn simulate(ctx: &Context) -> Result<SimulationSummary> {
    let cohort = processed_cohort(ctx)?;
    let dir = ctx.primary_run_dir()?;
    let encoder = Encoder::from_checkpoint(&load_checkpoint(&dir.join(ENCODER_FILE), &ctx.hash)?)?;
    let (bundle, policy_name) = match &ctx.config.paths.policy_checkpoint {
        Some(p) => (PolicyBundle::load(p)?, p.display().to_string()),
        None => {
            let path = dir.join(BUNDLE_FILE);
            (PolicyBundle::from_checkpoint(&load_checkpoint(&path, &ctx.hash)?)?, ctx.artifact_name(&path))
        }
    };
    check_encoder(&encoder, &bundle)?;
    let target = subset(&cohort, &[Split::Test]);
    let source = subset(&cohort, &[Split::Train, Split::Validation]);
    let policy = policy_actions(&target, &encoder, &bundle)?;
    let run = ctx.config.run(ctx.config.seed);
    let mortality = policy_simulation(&target, &source, &policy, OutcomeVariant::Mortality, &run.policy_sim)?;
    let acuity = policy_simulation(&target, &source, &policy, OutcomeVariant::Acuity, &run.policy_sim)?;
    let summary = SimulationSummary {
        config_hash: ctx.hash.clone(),
        policy: policy_name,
        target_trajectories: target.trajectories.len(),
        source_trajectories: source.trajectories.len(),
        mortality,
        acuity,
    };
    write_json(&ctx.path(SIMULATION_FILE), &summary)?;
    Ok(summary)
}

// ----------------------------------------------------------------------------
// baselines
// ----------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinesSummary {
    pub config_hash: String,
    /// Per-step inputs: the normalized features plus the previous action.
    pub features: String,
    pub train_steps: usize,
    pub test_majority_rate: f64,
    pub lr: BaselineResult,
    pub mlp: BaselineResult,
}

/// Grid-searched logistic regression and MLP on raw per-step features.
pub fn baselines(ctx: &Context) -> Result<BaselinesSummary> {
    let cohort = processed_cohort(ctx)?;
    let enc = FeatureEncoder { feature_width: cohort.feature_width() };
    let steps = |split: Split| -> Result<LabeledSteps> {
        LabeledSteps::from_buffer(&build_buffer_for(&cohort, &cohort.indices(split), &enc, &ctx.config.reward)?)
    };
    let (train, val, test) = (steps(Split::Train)?, steps(Split::Validation)?, steps(Split::Test)?);
    let run = ctx.config.run(ctx.config.seed);
    log::info!("logistic regression over {} values of C", ctx.config.search_space.lr.inverse_regularization.len());
    let lr = search_lr(&train, &val, &test, &ctx.config.search_space.lr, &run.baselines)?;
    log::info!("mlp search (budget {})", run.baselines.mlp_budget);
    let mlp = search_mlp(&train, &val, &test, &ctx.config.search_space.mlp, &run.baselines)?;
    let summary = BaselinesSummary {
        config_hash: ctx.hash.clone(),
        features: "raw".into(),
        train_steps: train.len(),
        test_majority_rate: majority_rate(&test.labels),
        lr,
        mlp,
    };
    write_json(&ctx.path(BASELINES_FILE), &summary)?;
    Ok(summary)
}
