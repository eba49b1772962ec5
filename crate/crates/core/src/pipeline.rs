//! Declarative experiments driven by one JSON config.
//!
//! Output directory layout:
//!
//! ```text
//! config.effective.json        fully defaulted config
//! teacher/manifest.json        trajectory index
//! teacher/epoch_NNNN.ckpt
//! runs/<arm>/seed_<s>/report.json
//! runs/<arm>/seed_<s>/epochs.csv
//! runs/<arm>/seed_<s>/hardness_<k>.csv      greedy search only
//! runs/<arm>/seed_<s>/trajectory/           per-epoch student checkpoints
//! analysis/summary.csv
//! analysis/kl_curve_<arm>_seed_<s>.csv
//! analysis/pca_<arm>_seed_<s>.csv
//! analysis/noise_<a>_vs_<b>_seed_<s>.csv
//! analysis/status.json                      outcome of each diagnostic
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    default_deltas, noise_sweep, pca_trajectory, KlCurve, Model, NoiseTeacher,
};
use crate::data::{load_cifar10_bin, load_idx, split_validation, Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::fit::predict_logits;
use crate::losses::DistillConfig;
use crate::nn::{NetworkSpec, Params};
use crate::strategy::{
    eei_select, hardness_from_logits, scale_switches, AnchorSchedule, GsConfig, StrategyMode,
};
use crate::trainer::{
    train_kd_baseline_with, train_rco_with, train_softmax_baseline_with, LossKind, RcoRunConfig,
    RunData, RunOptions, RunReport, TrainEvent,
};
use crate::trajectory::{
    checkpoint_file_name, load_checkpoint_for, load_trajectory, save_checkpoint,
    save_trajectory, train_teacher, write_atomic, Checkpoint, TrainConfig, Trajectory,
    TrajectoryManifest,
};

pub const EFFECTIVE_CONFIG: &str = "config.effective.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar10 {
        train_batches: Vec<PathBuf>,
        test_batches: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub source: DataSource,
    /// Standardize channels with statistics of the training split.
    #[serde(default)]
    pub normalize: bool,
    /// Use only the first `n` training examples (before the split).
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    /// Examples held out from training for validation.
    pub val_size: usize,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_capture_every() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub spec: NetworkSpec,
    pub train: TrainConfig,
    #[serde(default = "default_capture_every")]
    pub capture_every: u32,
}

fn default_hint_weight() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub spec: NetworkSpec,
    /// Recipe per stage; its seed is replaced by each entry of `seeds`.
    pub train: TrainConfig,
    #[serde(default)]
    pub loss_kind: LossKind,
    #[serde(default = "default_hint_weight")]
    pub hint_weight: f64,
    #[serde(default)]
    pub adapter: bool,
    #[serde(default = "default_true")]
    pub restart_lr: bool,
}

/// How one arm picks its supervision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyConfig {
    /// Cross-entropy only.
    Softmax,
    /// One anchor for the whole budget; the teacher's final epoch unless
    /// given.
    Kd {
        #[serde(default)]
        anchor_epoch: Option<u32>,
    },
    /// Multi-stage, one anchor every `gap` teacher epochs.
    Eei { gap: u32 },
    /// Single schedule with anchors every `gap` teacher epochs. Switch
    /// points default to the anchors rescaled onto the student's budget.
    OneStageEei {
        gap: u32,
        #[serde(default)]
        switch_epochs: Option<Vec<u32>>,
    },
    /// Greedy search over all captured checkpoints.
    Gs {
        delta: f64,
        #[serde(default)]
        stage_epochs: Option<u32>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    pub strategy: StrategyConfig,
}

fn default_noise_seed() -> u64 {
    0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub arm_a: String,
    pub arm_b: String,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default = "default_noise_seed")]
    pub seed: u64,
    /// Evaluate on the first `n` test examples only.
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_true")]
    pub kl_curve: bool,
    #[serde(default = "default_true")]
    pub pca: bool,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            kl_curve: true,
            pca: true,
            noise: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    pub arms: Vec<ArmConfig>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parse, resolve relative paths against the file's directory and
    /// validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset.source {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
            DataSource::Cifar10 {
                train_batches,
                test_batches,
            } => {
                train_batches.iter_mut().chain(test_batches.iter_mut()).for_each(fix);
            }
        }
        if let Some(out) = self.output_dir.as_mut() {
            fix(out);
        }
    }

    /// Check internal consistency and that input files exist.
    pub fn validate(&self) -> Result<()> {
        let check_file = |field: String, p: &Path| {
            if p.is_file() {
                Ok(())
            } else {
                Err(Error::config(field, format!("file {} does not exist", p.display())))
            }
        };
        match &self.dataset.source {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                check_file("dataset.source.train_images".into(), train_images)?;
                check_file("dataset.source.train_labels".into(), train_labels)?;
                check_file("dataset.source.test_images".into(), test_images)?;
                check_file("dataset.source.test_labels".into(), test_labels)?;
            }
            DataSource::Cifar10 {
                train_batches,
                test_batches,
            } => {
                if train_batches.is_empty() {
                    return Err(Error::config("dataset.source.train_batches", "is empty"));
                }
                if test_batches.is_empty() {
                    return Err(Error::config("dataset.source.test_batches", "is empty"));
                }
                for (i, p) in train_batches.iter().enumerate() {
                    check_file(format!("dataset.source.train_batches[{i}]"), p)?;
                }
                for (i, p) in test_batches.iter().enumerate() {
                    check_file(format!("dataset.source.test_batches[{i}]"), p)?;
                }
            }
        }
        if self.dataset.val_size == 0 {
            return Err(Error::config("dataset.val_size", "must be >= 1"));
        }
        if let Some(n) = self.dataset.train_limit {
            if n <= self.dataset.val_size {
                return Err(Error::config(
                    "dataset.train_limit",
                    format!("{n} leaves no training examples after a validation split of {}", self.dataset.val_size),
                ));
            }
        }
        if self.dataset.test_limit == Some(0) {
            return Err(Error::config("dataset.test_limit", "must be >= 1"));
        }
        at("teacher.spec", self.teacher.spec.validate().map(drop))?;
        at("teacher.train", self.teacher.train.validate())?;
        if self.teacher.capture_every == 0 {
            return Err(Error::config("teacher.capture_every", "must be >= 1"));
        }
        at("student.spec", self.student.spec.validate().map(drop))?;
        at("student.train", self.student.train.validate())?;
        at("distill", self.distill.validate())?;
        if self.student.spec.input_shape != self.teacher.spec.input_shape
            || self.student.spec.num_classes != self.teacher.spec.num_classes
        {
            return Err(Error::config(
                "student.spec",
                "input shape and class count must match the teacher",
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        if self.arms.is_empty() {
            return Err(Error::config("arms", "must list at least one arm"));
        }
        let mut names = BTreeSet::new();
        for (i, arm) in self.arms.iter().enumerate() {
            let field = format!("arms[{i}]");
            if arm.name.is_empty()
                || !arm
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                return Err(Error::config(
                    format!("{field}.name"),
                    "must be non-empty and use only letters, digits, '-' and '_'",
                ));
            }
            if !names.insert(arm.name.as_str()) {
                return Err(Error::config(format!("{field}.name"), format!("duplicate arm `{}`", arm.name)));
            }
            let run = self.run_config(arm, self.seeds[0]);
            at(&format!("{field}.strategy"), run.and_then(|r| r.validate()))?;
        }
        if let Some(noise) = &self.analysis.noise {
            for (field, name) in [("analysis.noise.arm_a", &noise.arm_a), ("analysis.noise.arm_b", &noise.arm_b)] {
                if !names.contains(name.as_str()) {
                    return Err(Error::config(field, format!("unknown arm `{name}`")));
                }
            }
            if noise.deltas.is_empty()
                || noise.deltas.iter().any(|d| !(0.0..=1.0).contains(d))
                || noise.deltas.windows(2).any(|w| w[0] > w[1])
            {
                return Err(Error::config(
                    "analysis.noise.deltas",
                    "must be a non-empty ascending list within [0, 1]",
                ));
            }
        }
        Ok(())
    }

    pub fn teacher_epochs(&self) -> u32 {
        self.teacher.train.epochs()
    }

    /// Epochs captured by the teacher run.
    pub fn captured_epochs(&self) -> Vec<u32> {
        let total = self.teacher_epochs();
        let every = self.teacher.capture_every.max(1);
        (1..=total).filter(|e| e % every == 0 || *e == total).collect()
    }

    /// Student run configuration of `arm` for `seed`. Softmax arms get a KD
    /// schedule placeholder that is never used.
    pub fn run_config(&self, arm: &ArmConfig, seed: u64) -> Result<RcoRunConfig> {
        let teacher_total = self.teacher_epochs();
        let student_total = self.student.train.epochs();
        let schedule = match &arm.strategy {
            StrategyConfig::Softmax => AnchorSchedule::kd(teacher_total),
            StrategyConfig::Kd { anchor_epoch } => {
                AnchorSchedule::kd(anchor_epoch.unwrap_or(teacher_total))
            }
            StrategyConfig::Eei { gap } => AnchorSchedule::eei(teacher_total, *gap)?,
            StrategyConfig::OneStageEei { gap, switch_epochs } => {
                let anchor_epochs = eei_select(teacher_total, *gap)?;
                let switch_epochs = match switch_epochs {
                    Some(v) => v.clone(),
                    None => scale_switches(&anchor_epochs, teacher_total, student_total)?,
                };
                AnchorSchedule {
                    mode: StrategyMode::OneStageEei,
                    anchor_epochs,
                    switch_epochs,
                }
            }
            StrategyConfig::Gs { .. } => AnchorSchedule::gs(),
        };
        let gs = match &arm.strategy {
            StrategyConfig::Gs { delta, stage_epochs } => GsConfig {
                delta: *delta,
                stage_epochs: *stage_epochs,
            },
            _ => GsConfig::default(),
        };
        let captured = self.captured_epochs();
        if let Some(missing) = schedule.anchor_epochs.iter().find(|e| !captured.contains(e)) {
            return Err(Error::config(
                "anchor",
                format!("epoch {missing} is not captured by the teacher (captured: {captured:?})"),
            ));
        }
        Ok(RcoRunConfig {
            student: self.student.spec.clone(),
            distill: self.distill.clone(),
            train: TrainConfig {
                seed,
                ..self.student.train.clone()
            },
            schedule,
            loss_kind: self.student.loss_kind,
            hint_weight: self.student.hint_weight,
            restart_lr: self.student.restart_lr,
            adapter: self.student.adapter,
            gs,
        })
    }
}

fn at(field: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config { field: inner, message } => Error::config(format!("{field}.{inner}"), message),
        other => Error::config(field, other.to_string()),
    })
}

/// Training, validation and test splits as used by every command.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Dataset<f32>,
    pub val: Dataset<f32>,
    pub test: Dataset<f32>,
    pub normalizer: Option<Normalizer>,
}

impl ExperimentData {
    pub fn run_data(&self) -> RunData<'_, f32> {
        RunData {
            train: &self.train,
            val: Some(&self.val),
            test: Some(&self.test),
        }
    }
}

pub fn load_data(cfg: &DatasetConfig) -> Result<ExperimentData> {
    let (full, test) = match &cfg.source {
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?),
        DataSource::Cifar10 {
            train_batches,
            test_batches,
        } => (load_cifar10_bin(train_batches)?, load_cifar10_bin(test_batches)?),
    };
    let full = match cfg.train_limit {
        Some(n) => full.take(n),
        None => full,
    };
    let test = match cfg.test_limit {
        Some(n) => test.take(n),
        None => test,
    };
    let split = split_validation(&full, cfg.val_size, cfg.split_seed)
        .map_err(|e| Error::config("dataset.val_size", e.to_string()))?;
    let (mut train, mut val, mut test) = (split.train, split.val, test);
    let normalizer = if cfg.normalize {
        let n = Normalizer::fit(&train)?;
        for d in [&mut train, &mut val, &mut test] {
            n.apply(d)?;
        }
        Some(n)
    } else {
        None
    };
    Ok(ExperimentData {
        train,
        val,
        test,
        normalizer,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Write the fully defaulted config (without the output directory).
pub fn echo_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut echo = cfg.clone();
    echo.output_dir = None;
    write_text(&out.join(EFFECTIVE_CONFIG), &(echo.to_json()? + "\n"))
}

pub fn teacher_dir(out: &Path) -> PathBuf {
    out.join("teacher")
}

pub fn run_dir(out: &Path, arm: &str, seed: u64) -> PathBuf {
    out.join("runs").join(arm).join(format!("seed_{seed}"))
}

pub fn analysis_dir(out: &Path) -> PathBuf {
    out.join("analysis")
}

/// Train the teacher and store its trajectory under `out/teacher`.
pub fn cmd_train_teacher(cfg: &ExperimentConfig, out: &Path) -> Result<TrajectoryManifest> {
    let data = load_data(&cfg.dataset)?;
    train_teacher_on(cfg, &data, out)
}

fn train_teacher_on(cfg: &ExperimentConfig, data: &ExperimentData, out: &Path) -> Result<TrajectoryManifest> {
    echo_config(cfg, out)?;
    let traj = train_teacher(&cfg.teacher.spec, &cfg.teacher.train, &data.train, cfg.teacher.capture_every)?;
    let dir = teacher_dir(out);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    save_trajectory(&traj, &dir)
}

/// Outcome of one arm and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub arm: String,
    pub seed: u64,
    pub test_top1: Option<f64>,
    pub final_val_kl: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub optimizer_steps: u64,
    pub anchors: Vec<u32>,
}

/// Run every arm for every seed against the stored teacher trajectory.
/// `threads` bounds how many runs execute at once.
pub fn cmd_distill(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<Vec<RunSummary>> {
    let data = load_data(&cfg.dataset)?;
    distill_on(cfg, &data, out, threads)
}

fn distill_on(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    out: &Path,
    threads: usize,
) -> Result<Vec<RunSummary>> {
    let traj: Trajectory<f32> = load_trajectory(&teacher_dir(out))?;
    if traj.spec != cfg.teacher.spec {
        return Err(Error::config(
            "teacher.spec",
            "stored trajectory was trained with a different teacher spec",
        ));
    }
    let mut jobs = Vec::new();
    for arm in &cfg.arms {
        for &seed in &cfg.seeds {
            let run = cfg.run_config(arm, seed)?;
            if !matches!(arm.strategy, StrategyConfig::Softmax) {
                for &e in &run.schedule.anchor_epochs {
                    if traj.get(e).is_none() {
                        return Err(Error::MissingAnchor(e));
                    }
                }
            }
            jobs.push((arm, seed, run));
        }
    }
    echo_config(cfg, out)?;
    let results: Vec<Mutex<Option<Result<RunSummary>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((arm, seed, run)) = jobs.get(i) else {
                    break;
                };
                let r = run_arm(arm, *seed, run, &traj, data, out);
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("job ran"))
        .collect()
}

fn run_arm(
    arm: &ArmConfig,
    seed: u64,
    run: &RcoRunConfig,
    traj: &Trajectory<f32>,
    data: &ExperimentData,
    out: &Path,
) -> Result<RunSummary> {
    let dir = run_dir(out, &arm.name, seed);
    let traj_dir = dir.join("trajectory");
    fs::create_dir_all(&traj_dir).map_err(|e| Error::io(&traj_dir, e))?;
    let digest = run.student.digest();
    let mut save_err: Option<Error> = None;
    let observer = |ev: &TrainEvent<'_, f32>| {
        if let TrainEvent::EpochEnd { record, params } = ev {
            let cp = Checkpoint {
                epoch: record.epoch,
                params: (*params).clone(),
                lr_at_capture: record.lr,
                train_loss: record.train_loss,
                spec_hash: digest.clone(),
                seed,
            };
            if let Err(e) = save_checkpoint(&cp, &traj_dir.join(checkpoint_file_name(record.epoch))) {
                save_err.get_or_insert(e);
            }
        }
    };
    let opts = RunOptions::default().observe(observer);
    let rd = data.run_data();
    let report: RunReport<f32> = match &arm.strategy {
        StrategyConfig::Softmax => train_softmax_baseline_with(&run.student, &run.train, rd, opts)?,
        StrategyConfig::Kd { .. } => {
            let epoch = run.schedule.anchor_epochs[0];
            let anchor = traj.get(epoch).ok_or(Error::MissingAnchor(epoch))?;
            train_kd_baseline_with(run, &traj.spec, anchor, rd, opts)?
        }
        _ => train_rco_with(run, traj, rd, opts)?,
    };
    if let Some(e) = save_err {
        return Err(e);
    }
    write_text(&dir.join("report.json"), &(report.to_json()? + "\n"))?;
    write_text(&dir.join("epochs.csv"), &report.epochs_csv())?;
    for (k, table) in report.hardness_tables.iter().enumerate() {
        write_text(&dir.join(format!("hardness_{k}.csv")), &table.to_csv())?;
    }
    let last = report.last_epoch();
    Ok(RunSummary {
        arm: arm.name.clone(),
        seed,
        test_top1: last.and_then(|r| r.test_top1),
        final_val_kl: last.and_then(|r| r.val_kl),
        final_train_loss: last.map(|r| r.train_loss),
        optimizer_steps: report.optimizer_steps,
        anchors: report.anchors.clone(),
    })
}

/// Result of one diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticStatus {
    pub name: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOutcome {
    pub diagnostics: Vec<DiagnosticStatus>,
}

impl AnalysisOutcome {
    pub fn failures(&self) -> impl Iterator<Item = &DiagnosticStatus> {
        self.diagnostics.iter().filter(|d| !d.ok)
    }
}

/// Produce every diagnostic; a failing one is recorded and the rest still
/// run.
pub fn cmd_analyze(cfg: &ExperimentConfig, out: &Path) -> Result<AnalysisOutcome> {
    let data = load_data(&cfg.dataset)?;
    analyze_on(cfg, &data, out)
}

fn analyze_on(cfg: &ExperimentConfig, data: &ExperimentData, out: &Path) -> Result<AnalysisOutcome> {
    let dir = analysis_dir(out);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut status = Vec::new();
    let mut record = |name: String, r: Result<()>| {
        status.push(DiagnosticStatus {
            name,
            ok: r.is_ok(),
            error: r.err().map(|e| e.to_string()),
        });
    };

    let traj: Result<Trajectory<f32>> = load_trajectory(&teacher_dir(out));
    record("summary".into(), write_summary(cfg, out, &dir));

    if cfg.analysis.kl_curve {
        match &traj {
            Ok(traj) => {
                let teacher_logits: Result<Vec<_>> = traj
                    .checkpoints
                    .iter()
                    .map(|cp| predict_logits(&traj.spec, &cp.params, &data.val))
                    .collect();
                for arm in &cfg.arms {
                    for &seed in &cfg.seeds {
                        let name = format!("kl_curve_{}_seed_{seed}", arm.name);
                        let r = (|| {
                            let logits = teacher_logits.as_ref().map_err(clone_err)?;
                            let student = load_final_student(cfg, out, &arm.name, seed)?;
                            let s = predict_logits(&cfg.student.spec, &student, &data.val)?;
                            let kl = logits
                                .iter()
                                .map(|t| hardness_from_logits(&s, t, cfg.distill.temperature))
                                .collect::<Result<Vec<_>>>()?;
                            let curve = KlCurve {
                                tag: format!("{}/seed_{seed}", arm.name),
                                teacher_epochs: traj.epochs(),
                                kl,
                            };
                            write_text(&dir.join(format!("{name}.csv")), &curve.to_csv())
                        })();
                        record(name, r);
                    }
                }
            }
            Err(e) => record("kl_curve".into(), Err(clone_err(e))),
        }
    }

    if cfg.analysis.pca {
        for arm in &cfg.arms {
            for &seed in &cfg.seeds {
                let name = format!("pca_{}_seed_{seed}", arm.name);
                let r = (|| {
                    let (epochs, params) = load_student_trajectory(cfg, out, &arm.name, seed)?;
                    let proj = pca_trajectory(&params)?.with_labels(epochs);
                    write_text(&dir.join(format!("{name}.csv")), &proj.to_csv())
                })();
                record(name, r);
            }
        }
    }

    if let Some(noise) = &cfg.analysis.noise {
        let test = match noise.limit {
            Some(n) => data.test.take(n),
            None => data.test.clone(),
        };
        for &seed in &cfg.seeds {
            let name = format!("noise_{}_vs_{}_seed_{seed}", noise.arm_a, noise.arm_b);
            let r = (|| {
                let a = load_final_student(cfg, out, &noise.arm_a, seed)?;
                let b = load_final_student(cfg, out, &noise.arm_b, seed)?;
                let traj = traj.as_ref().map_err(clone_err)?;
                let teacher = NoiseTeacher {
                    model: Model {
                        spec: &traj.spec,
                        params: &traj.final_checkpoint().params,
                    },
                    distill: &cfg.distill,
                };
                let sweep = noise_sweep(
                    Model {
                        spec: &cfg.student.spec,
                        params: &a,
                    },
                    Model {
                        spec: &cfg.student.spec,
                        params: &b,
                    },
                    &test,
                    &noise.deltas,
                    noise.seed,
                    Some(teacher),
                )?;
                write_text(&dir.join(format!("{name}.csv")), &sweep.to_csv())
            })();
            record(name, r);
        }
    }

    let outcome = AnalysisOutcome { diagnostics: status };
    write_text(
        &dir.join("status.json"),
        &(serde_json::to_string_pretty(&outcome)? + "\n"),
    )?;
    Ok(outcome)
}

fn clone_err(e: &Error) -> Error {
    Error::invalid(e.to_string())
}

fn load_final_student(cfg: &ExperimentConfig, out: &Path, arm: &str, seed: u64) -> Result<Params<f32>> {
    let (_, mut params) = load_student_trajectory(cfg, out, arm, seed)?;
    params
        .pop()
        .ok_or_else(|| Error::invalid(format!("run {arm}/seed_{seed} has no checkpoints")))
}

/// Per-epoch student checkpoints of a run, in epoch order.
fn load_student_trajectory(
    cfg: &ExperimentConfig,
    out: &Path,
    arm: &str,
    seed: u64,
) -> Result<(Vec<u32>, Vec<Params<f32>>)> {
    let dir = run_dir(out, arm, seed);
    let report_path = dir.join("report.json");
    let text = fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
    let report: serde_json::Value = serde_json::from_str(&text)?;
    let epochs: Vec<u32> = report["epochs"]
        .as_array()
        .map(|a| a.iter().filter_map(|r| r["epoch"].as_u64()).map(|e| e as u32).collect())
        .unwrap_or_default();
    let mut params = Vec::with_capacity(epochs.len());
    for &e in &epochs {
        let path = dir.join("trajectory").join(checkpoint_file_name(e));
        params.push(load_checkpoint_for::<f32>(&path, &cfg.student.spec)?.params);
    }
    Ok((epochs, params))
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// `arm,seed,test_top1,final_val_kl,final_train_loss,optimizer_steps` per
/// run, then one `median` row per arm.
fn write_summary(cfg: &ExperimentConfig, out: &Path, dir: &Path) -> Result<()> {
    let mut s = String::from("arm,seed,test_top1,final_val_kl,final_train_loss,optimizer_steps\n");
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for arm in &cfg.arms {
        let mut cols: [Vec<f64>; 4] = Default::default();
        for &seed in &cfg.seeds {
            let path = run_dir(out, &arm.name, seed).join("report.json");
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let report: serde_json::Value = serde_json::from_str(&text)?;
            let last = report["epochs"].as_array().and_then(|a| a.last());
            let field = |k: &str| last.and_then(|r| r[k].as_f64());
            let row = [
                field("test_top1"),
                field("val_kl"),
                field("train_loss"),
                report["optimizer_steps"].as_f64(),
            ];
            for (c, v) in cols.iter_mut().zip(row) {
                c.extend(v);
            }
            let _ = writeln!(
                s,
                "{},{seed},{},{},{},{}",
                arm.name,
                opt(row[0]),
                opt(row[1]),
                opt(row[2]),
                opt(row[3])
            );
        }
        let [a, b, c, d] = cols.map(median);
        let _ = writeln!(s, "{},median,{},{},{},{}", arm.name, opt(a), opt(b), opt(c), opt(d));
    }
    write_text(&dir.join("summary.csv"), &s)
}

/// All commands in sequence over data loaded once.
pub fn cmd_all(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<AnalysisOutcome> {
    let data = load_data(&cfg.dataset)?;
    train_teacher_on(cfg, &data, out)?;
    distill_on(cfg, &data, out, threads)?;
    analyze_on(cfg, &data, out)
}
