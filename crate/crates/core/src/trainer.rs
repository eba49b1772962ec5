//! Sequential student training against an ordered set of teacher anchors,
//! plus the KD and plain cross-entropy baselines.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::analysis::top1_from_logits;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::fit::{epoch_seed, mean_softened_kl, predict_logits, run_epoch, BatchLoss};
use crate::losses::{ce_loss, mimic_loss, rco_step_loss, DistillConfig};
use crate::nn::kernels::{dense_backward, dense_forward};
use crate::nn::{forward, init_params, sgd_step, LayerParams, LayerSpec, NetworkSpec, Params, Trace};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;
use crate::strategy::{greedy_next_with, AnchorSchedule, GsConfig, HardnessTable, StrategyMode};
use crate::tensor::Tensor;
use crate::trajectory::{Checkpoint, TrainConfig, Trajectory};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy plus softened KL to the anchor's logits.
    #[default]
    Kd,
    /// Cross-entropy plus squared feature distance to the anchor's features.
    Hint,
    /// Both terms.
    HintKd,
}

fn default_hint_weight() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

/// Everything a student run needs besides the teacher and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcoRunConfig {
    pub student: NetworkSpec,
    #[serde(default)]
    pub distill: DistillConfig,
    /// Optimizer recipe. Its schedule is the per-stage budget for multi-stage
    /// strategies and the whole budget otherwise.
    pub train: TrainConfig,
    pub schedule: AnchorSchedule,
    #[serde(default)]
    pub loss_kind: LossKind,
    #[serde(default = "default_hint_weight")]
    pub hint_weight: f64,
    /// Multi-stage only: restart the LR schedule and momentum at each anchor.
    #[serde(default = "default_true")]
    pub restart_lr: bool,
    /// Learn a dense map from student to teacher features for hint losses.
    #[serde(default)]
    pub adapter: bool,
    #[serde(default)]
    pub gs: GsConfig,
}

impl RcoRunConfig {
    pub fn new(student: NetworkSpec, train: TrainConfig, schedule: AnchorSchedule) -> Self {
        Self {
            student,
            distill: DistillConfig::default(),
            train,
            schedule,
            loss_kind: LossKind::Kd,
            hint_weight: 1.0,
            restart_lr: true,
            adapter: false,
            gs: GsConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.student.validate()?;
        self.distill.validate()?;
        self.train.validate()?;
        self.schedule.validate()?;
        self.gs.validate()?;
        if !(self.hint_weight >= 0.0 && self.hint_weight.is_finite()) {
            return Err(Error::config("hint_weight", "must be a finite value >= 0"));
        }
        if let Some(k) = self.gs.stage_epochs {
            if k > self.train.epochs() {
                return Err(Error::config(
                    "gs.stage_epochs",
                    format!("{k} exceeds the schedule's {} epochs", self.train.epochs()),
                ));
            }
        }
        Ok(())
    }
}

/// Training, validation and test sets of one run.
#[derive(Debug, Clone, Copy)]
pub struct RunData<'a, T> {
    pub train: &'a Dataset<T>,
    pub val: Option<&'a Dataset<T>>,
    pub test: Option<&'a Dataset<T>>,
}

impl<'a, T> RunData<'a, T> {
    pub fn train_only(train: &'a Dataset<T>) -> Self {
        Self {
            train,
            val: None,
            test: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Completed epochs so far, counted across stages.
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    pub anchor_epoch: Option<u32>,
    /// Softened KL from the current anchor to the student on validation data.
    pub val_kl: Option<f64>,
    pub test_top1: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrPolicy {
    /// One stage, one schedule.
    Single,
    /// Schedule and momentum restarted at every stage.
    Restart,
    /// One schedule running across all stages.
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchRecord {
    /// Completed epochs when the target changed.
    pub epoch: u32,
    pub from_anchor: u32,
    pub to_anchor: u32,
}

/// Outcome of a student run. Parameters and wall-clock time are not part of
/// the serialized form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport<T> {
    pub seed: u64,
    pub lr_policy: LrPolicy,
    /// Anchors in the order they supervised the student.
    pub anchors: Vec<u32>,
    pub switches: Vec<SwitchRecord>,
    pub epochs: Vec<EpochRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub hardness_tables: Vec<HardnessTable>,
    pub optimizer_steps: u64,
    #[serde(skip)]
    pub final_params: Params<T>,
    #[serde(skip)]
    pub wall_clock: Duration,
}

impl<T> RunReport<T> {
    pub fn switch_epochs(&self) -> Vec<u32> {
        self.switches.iter().map(|s| s.epoch).collect()
    }

    pub fn last_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-epoch CSV: `epoch,lr,train_loss,anchor_epoch,val_kl,test_top1`.
    pub fn epochs_csv(&self) -> String {
        fn opt<V: ToString>(v: Option<V>) -> String {
            v.map(|v| v.to_string()).unwrap_or_default()
        }
        let mut s = String::from("epoch,lr,train_loss,anchor_epoch,val_kl,test_top1\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch,
                r.lr,
                r.train_loss,
                opt(r.anchor_epoch),
                opt(r.val_kl),
                opt(r.test_top1)
            );
        }
        s
    }
}

/// Notifications emitted during training.
pub enum TrainEvent<'a, T> {
    EpochEnd {
        record: &'a EpochRecord,
        params: &'a Params<T>,
    },
    /// Emitted when a new anchor takes over, before its first step.
    AnchorSwitch {
        switch: &'a SwitchRecord,
        before: &'a Params<T>,
        after: &'a Params<T>,
    },
}

pub type Observer<'a, T> = dyn FnMut(&TrainEvent<'_, T>) + 'a;

/// Optional inputs shared by all training entry points.
#[derive(Default)]
pub struct RunOptions<'a, T> {
    /// Start from these parameters instead of a seeded initialization.
    pub init: Option<Params<T>>,
    pub observer: Option<Box<Observer<'a, T>>>,
}

impl<'a, T> RunOptions<'a, T> {
    pub fn with_init(init: Params<T>) -> Self {
        Self {
            init: Some(init),
            observer: None,
        }
    }

    pub fn observe(mut self, f: impl FnMut(&TrainEvent<'_, T>) + 'a) -> Self {
        self.observer = Some(Box::new(f));
        self
    }
}

/// Train a student along the configured anchor schedule.
pub fn train_rco<T: Scalar>(
    cfg: &RcoRunConfig,
    trajectory: &Trajectory<T>,
    data: RunData<'_, T>,
) -> Result<RunReport<T>> {
    train_rco_with(cfg, trajectory, data, RunOptions::default())
}

pub fn train_rco_with<'o, T: Scalar>(
    cfg: &RcoRunConfig,
    trajectory: &Trajectory<T>,
    data: RunData<'_, T>,
    opts: RunOptions<'o, T>,
) -> Result<RunReport<T>> {
    cfg.validate()?;
    trajectory.validate()?;
    let anchors = resolve_anchors(&cfg.schedule, trajectory)?;
    if cfg.schedule.mode != StrategyMode::Gs {
        let last = anchors.last().expect("validated non-empty");
        if last.epoch != trajectory.final_checkpoint().epoch {
            return Err(Error::config(
                "schedule.anchor_epochs",
                format!(
                    "last anchor {} is not the teacher's final epoch {}",
                    last.epoch,
                    trajectory.final_checkpoint().epoch
                ),
            ));
        }
    }
    if cfg.schedule.mode == StrategyMode::OneStageEei {
        return train_one_stage_inner(cfg, trajectory, data, anchors, opts);
    }
    let mut runner = Runner::new(cfg, Some(&trajectory.spec), data, opts)?;
    let total = cfg.train.epochs();
    match cfg.schedule.mode {
        StrategyMode::Kd => runner.run_stage(anchors[0], &stage_lrs(cfg, 0)?)?,
        StrategyMode::Eei => {
            for (k, anchor) in anchors.iter().enumerate() {
                if cfg.restart_lr {
                    runner.reset_momentum();
                    runner.run_stage(anchor, &stage_lrs(cfg, 0)?)?;
                } else {
                    let global = k as u32 * total;
                    runner.run_stage(anchor, &stage_lrs(cfg, global)?)?;
                }
            }
        }
        StrategyMode::OneStageEei => unreachable!("handled above"),
        StrategyMode::Gs => runner.run_gs(trajectory)?,
    }
    Ok(runner.finish())
}

/// One-stage variant: a single LR schedule, with the supervising anchor
/// switched at the configured student epochs.
pub fn train_one_stage<T: Scalar>(
    cfg: &RcoRunConfig,
    trajectory: &Trajectory<T>,
    data: RunData<'_, T>,
) -> Result<RunReport<T>> {
    train_one_stage_with(cfg, trajectory, data, RunOptions::default())
}

pub fn train_one_stage_with<'o, T: Scalar>(
    cfg: &RcoRunConfig,
    trajectory: &Trajectory<T>,
    data: RunData<'_, T>,
    opts: RunOptions<'o, T>,
) -> Result<RunReport<T>> {
    cfg.validate()?;
    trajectory.validate()?;
    if cfg.schedule.mode != StrategyMode::OneStageEei {
        return Err(Error::config("schedule.mode", "expected one_stage_eei"));
    }
    let anchors = resolve_anchors(&cfg.schedule, trajectory)?;
    train_one_stage_inner(cfg, trajectory, data, anchors, opts)
}

fn train_one_stage_inner<'o, T: Scalar>(
    cfg: &RcoRunConfig,
    trajectory: &Trajectory<T>,
    data: RunData<'_, T>,
    anchors: Vec<&Checkpoint<T>>,
    opts: RunOptions<'o, T>,
) -> Result<RunReport<T>> {
    let total = cfg.train.epochs();
    let switches = &cfg.schedule.switch_epochs;
    if switches.last() != Some(&total) {
        return Err(Error::config(
            "schedule.switch_epochs",
            format!("must end at the student's total of {total} epochs"),
        ));
    }
    let mut runner = Runner::new(cfg, Some(&trajectory.spec), data, opts)?;
    runner.continuous = true;
    let mut start = 0;
    for (anchor, &end) in anchors.iter().zip(switches) {
        let lrs = (start..end)
            .map(|e| cfg.train.sgd.schedule.lr_at(e))
            .collect::<Result<Vec<_>>>()?;
        runner.run_stage(anchor, &lrs)?;
        start = end;
    }
    Ok(runner.finish())
}

/// Single-anchor distillation for the full budget.
pub fn train_kd_baseline<T: Scalar>(
    cfg: &RcoRunConfig,
    teacher_spec: &NetworkSpec,
    anchor: &Checkpoint<T>,
    data: RunData<'_, T>,
) -> Result<RunReport<T>> {
    train_kd_baseline_with(cfg, teacher_spec, anchor, data, RunOptions::default())
}

pub fn train_kd_baseline_with<'o, T: Scalar>(
    cfg: &RcoRunConfig,
    teacher_spec: &NetworkSpec,
    anchor: &Checkpoint<T>,
    data: RunData<'_, T>,
    opts: RunOptions<'o, T>,
) -> Result<RunReport<T>> {
    let mut cfg = cfg.clone();
    cfg.schedule = AnchorSchedule::kd(anchor.epoch);
    cfg.validate()?;
    anchor.params.check_matches(teacher_spec)?;
    let mut runner = Runner::new(&cfg, Some(teacher_spec), data, opts)?;
    runner.run_stage(anchor, &stage_lrs(&cfg, 0)?)?;
    Ok(runner.finish())
}

/// Plain cross-entropy training of the student, the no-teacher control.
pub fn train_softmax_baseline<T: Scalar>(
    student: &NetworkSpec,
    train: &TrainConfig,
    data: RunData<'_, T>,
) -> Result<RunReport<T>> {
    train_softmax_baseline_with(student, train, data, RunOptions::default())
}

pub fn train_softmax_baseline_with<'o, T: Scalar>(
    student: &NetworkSpec,
    train: &TrainConfig,
    data: RunData<'_, T>,
    opts: RunOptions<'o, T>,
) -> Result<RunReport<T>> {
    let cfg = RcoRunConfig::new(student.clone(), train.clone(), AnchorSchedule::kd(0));
    if train.epochs() > 0 {
        train.validate()?;
    } else if train.batch_size == 0 {
        return Err(Error::config("batch_size", "must be >= 1"));
    }
    student.validate()?;
    let mut runner = Runner::new(&cfg, None, data, opts)?;
    let lrs = (0..train.epochs())
        .map(|e| train.sgd.schedule.lr_at(e))
        .collect::<Result<Vec<_>>>()?;
    runner.run_plain(&lrs)?;
    Ok(runner.finish())
}

/// Look up every scheduled anchor before any training happens.
fn resolve_anchors<'t, T: Scalar>(
    schedule: &AnchorSchedule,
    trajectory: &'t Trajectory<T>,
) -> Result<Vec<&'t Checkpoint<T>>> {
    schedule
        .anchor_epochs
        .iter()
        .map(|&e| trajectory.get(e).ok_or(Error::MissingAnchor(e)))
        .collect()
}

/// Learning rates for one stage: `lr_at(offset + k)` clamped to the final
/// scheduled epoch, for `k` in the stage budget.
fn stage_lrs(cfg: &RcoRunConfig, offset: u32) -> Result<Vec<f64>> {
    let sched = &cfg.train.sgd.schedule;
    let epochs = match cfg.schedule.mode {
        StrategyMode::Gs => cfg.gs.stage_epochs.unwrap_or(sched.total_epochs),
        _ => sched.total_epochs,
    };
    (0..epochs)
        .map(|k| sched.lr_at((offset + k).min(sched.total_epochs - 1)))
        .collect()
}

/// Dense map from student features to teacher features.
struct Adapter<T> {
    fan_in: usize,
    fan_out: usize,
    params: Params<T>,
    velocity: Params<T>,
}

impl<T: Scalar> Adapter<T> {
    fn new(fan_in: usize, fan_out: usize, seed: u64) -> Result<Self> {
        let spec = NetworkSpec {
            input_shape: vec![fan_in],
            layers: vec![LayerSpec::Dense { fan_in, fan_out }],
            num_classes: fan_out,
            feature_tap: 0,
        };
        let params = init_params(&spec, derive_seed(seed, stream::ADAPTER))?;
        let velocity = params.zeros_like();
        Ok(Self {
            fan_in,
            fan_out,
            params,
            velocity,
        })
    }

    fn layer(&self) -> (&[T], &[T]) {
        let p = self.params.layers[0].as_ref().expect("dense layer");
        (p.weight.data(), p.bias.data())
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (w, b) = self.layer();
        let batch = x.rows();
        Tensor::new(
            vec![batch, self.fan_out],
            dense_forward(x.data(), w, b, batch, self.fan_in, self.fan_out),
        )
    }

    /// Returns the gradient at the adapter input and applies one SGD step.
    fn backward_step(
        &mut self,
        x: &Tensor<T>,
        g: &Tensor<T>,
        sgd: &crate::nn::SgdConfig,
        lr: f64,
    ) -> Result<Tensor<T>> {
        let batch = x.rows();
        let mut grads = self.params.zeros_like();
        let gx = {
            let (w, _) = self.layer();
            let LayerParams { weight, bias } = grads.layers[0].as_mut().expect("dense layer");
            dense_backward(
                x.data(),
                w,
                g.data(),
                batch,
                self.fan_in,
                self.fan_out,
                weight.data_mut(),
                bias.data_mut(),
                true,
            )
                .expect("input gradient requested")
        };
        sgd_step(&mut self.params, &mut self.velocity, &grads, sgd, lr)?;
        Tensor::new(vec![batch, self.fan_in], gx)
    }
}

struct Runner<'c, 'd, 'o, T> {
    cfg: &'c RcoRunConfig,
    teacher: Option<&'c NetworkSpec>,
    data: RunData<'d, T>,
    observer: Option<Box<Observer<'o, T>>>,
    params: Params<T>,
    velocity: Params<T>,
    adapter: Option<Adapter<T>>,
    epoch: u32,
    steps: u64,
    stages: u32,
    continuous: bool,
    anchors: Vec<u32>,
    switches: Vec<SwitchRecord>,
    records: Vec<EpochRecord>,
    tables: Vec<HardnessTable>,
    train_logits: Option<(u32, Tensor<T>)>,
    val_logits: HashMap<u32, Tensor<T>>,
    started: Instant,
}

impl<'c, 'd, 'o, T: Scalar> Runner<'c, 'd, 'o, T> {
    fn new(
        cfg: &'c RcoRunConfig,
        teacher: Option<&'c NetworkSpec>,
        data: RunData<'d, T>,
        opts: RunOptions<'o, T>,
    ) -> Result<Self> {
        let student = &cfg.student;
        for (name, d) in [("train", Some(data.train)), ("val", data.val), ("test", data.test)] {
            if let Some(d) = d {
                if d.example_shape() != student.input_shape.as_slice() {
                    return Err(Error::shape(
                        format!("{name} examples"),
                        &student.input_shape,
                        d.example_shape(),
                    ));
                }
            }
        }
        let mut adapter = None;
        if let Some(t) = teacher {
            t.validate()?;
            if t.input_shape != student.input_shape || t.num_classes != student.num_classes {
                return Err(Error::config(
                    "student",
                    format!(
                        "teacher takes {:?} -> {} classes, student {:?} -> {}",
                        t.input_shape, t.num_classes, student.input_shape, student.num_classes
                    ),
                ));
            }
            if cfg.loss_kind != LossKind::Kd {
                let (ds, dt) = (student.feature_dim()?, t.feature_dim()?);
                if cfg.adapter {
                    adapter = Some(Adapter::new(ds, dt, cfg.train.seed)?);
                } else if ds != dt {
                    return Err(Error::config(
                        "adapter",
                        format!("student features ({ds}) differ from teacher features ({dt}); enable the adapter"),
                    ));
                }
            }
        }
        let params = match opts.init {
            Some(p) => {
                p.check_matches(student)?;
                p
            }
            None => init_params(student, cfg.train.seed)?,
        };
        let velocity = params.zeros_like();
        Ok(Self {
            cfg,
            teacher,
            data,
            observer: opts.observer,
            params,
            velocity,
            adapter,
            epoch: 0,
            steps: 0,
            stages: 0,
            continuous: !cfg.restart_lr,
            anchors: Vec::new(),
            switches: Vec::new(),
            records: Vec::new(),
            tables: Vec::new(),
            train_logits: None,
            val_logits: HashMap::new(),
            started: Instant::now(),
        })
    }

    fn reset_momentum(&mut self) {
        self.velocity = self.params.zeros_like();
        if let Some(a) = self.adapter.as_mut() {
            a.velocity = a.params.zeros_like();
        }
    }

    fn steps_per_epoch(&self) -> u64 {
        self.data.train.len().div_ceil(self.cfg.train.batch_size) as u64
    }

    fn anchor_val_logits(&mut self, anchor: &Checkpoint<T>) -> Result<Option<&Tensor<T>>> {
        let (Some(val), Some(spec)) = (self.data.val, self.teacher) else {
            return Ok(None);
        };
        if let Entry::Vacant(slot) = self.val_logits.entry(anchor.epoch) {
            slot.insert(predict_logits(spec, &anchor.params, val)?);
        }
        Ok(self.val_logits.get(&anchor.epoch))
    }

    fn run_stage(&mut self, anchor: &Checkpoint<T>, lrs: &[f64]) -> Result<()> {
        let teacher = self.teacher.expect("distillation has a teacher");
        anchor.params.check_matches(teacher)?;
        if let Some(&from) = self.anchors.last() {
            let switch = SwitchRecord {
                epoch: self.epoch,
                from_anchor: from,
                to_anchor: anchor.epoch,
            };
            if let Some(obs) = self.observer.as_mut() {
                let before = self.params.clone();
                obs(&TrainEvent::AnchorSwitch {
                    switch: &switch,
                    before: &before,
                    after: &self.params,
                });
            }
            self.switches.push(switch);
        }
        self.anchors.push(anchor.epoch);
        self.stages += 1;

        let kind = self.cfg.loss_kind;
        if kind == LossKind::Kd && self.train_logits.as_ref().map(|(e, _)| *e) != Some(anchor.epoch) {
            self.train_logits = None;
            let logits = predict_logits(teacher, &anchor.params, self.data.train)?;
            self.train_logits = Some((anchor.epoch, logits));
        }
        for &lr in lrs {
            let cfg = self.cfg;
            let train_logits = self.train_logits.as_ref().map(|(_, t)| t);
            let adapter = &mut self.adapter;
            let loss = run_epoch(
                &cfg.student,
                &mut self.params,
                &mut self.velocity,
                self.data.train,
                cfg.train.batch_size,
                epoch_seed(cfg.train.seed, self.epoch),
                &cfg.train.sgd,
                lr,
                |batch, trace| {
                    distill_objective(cfg, teacher, anchor, train_logits, adapter.as_mut(), lr, batch, trace)
                },
            )?;
            self.end_epoch(lr, loss, Some(anchor))?;
        }
        Ok(())
    }

    fn run_plain(&mut self, lrs: &[f64]) -> Result<()> {
        self.stages += 1;
        for &lr in lrs {
            let cfg = self.cfg;
            let loss = run_epoch(
                &cfg.student,
                &mut self.params,
                &mut self.velocity,
                self.data.train,
                cfg.train.batch_size,
                epoch_seed(cfg.train.seed, self.epoch),
                &cfg.train.sgd,
                lr,
                |batch, trace| {
                    let (loss, logit_grad) = ce_loss(trace.logits(), &batch.labels)?;
                    Ok(BatchLoss {
                        loss,
                        logit_grad,
                        feature_grad: None,
                    })
                },
            )?;
            self.end_epoch(lr, loss, None)?;
        }
        Ok(())
    }

    fn run_gs(&mut self, trajectory: &Trajectory<T>) -> Result<()> {
        let Some(val) = self.data.val else {
            return Err(Error::config("val_size", "greedy search needs a validation set"));
        };
        let n = trajectory.checkpoints.len();
        let mut current = 0;
        loop {
            let anchor = &trajectory.checkpoints[current];
            if self.cfg.restart_lr {
                self.reset_momentum();
                self.run_stage(anchor, &stage_lrs(self.cfg, 0)?)?;
            } else {
                let offset = self.epoch;
                self.run_stage(anchor, &stage_lrs(self.cfg, offset)?)?;
            }
            if current + 1 >= n {
                break;
            }
            let student_logits = predict_logits(&self.cfg.student, &self.params, val)?;
            let mut cache = std::mem::take(&mut self.val_logits);
            let teacher = &trajectory.spec;
            let step = greedy_next_with(
                &student_logits,
                trajectory,
                current,
                &self.cfg.gs,
                self.cfg.distill.temperature,
                |j| {
                    let cp = &trajectory.checkpoints[j];
                    let logits = match cache.entry(cp.epoch) {
                        Entry::Occupied(e) => e.into_mut(),
                        Entry::Vacant(e) => e.insert(predict_logits(teacher, &cp.params, val)?),
                    };
                    Ok(logits.clone())
                },
            );
            self.val_logits = cache;
            let step = step?;
            self.tables.push(step.table);
            current = step.next;
        }
        Ok(())
    }

    fn end_epoch(&mut self, lr: f64, train_loss: f64, anchor: Option<&Checkpoint<T>>) -> Result<()> {
        self.epoch += 1;
        self.steps += self.steps_per_epoch();
        let val_kl = match (anchor, self.data.val) {
            (Some(a), Some(val)) => {
                let tau = self.cfg.distill.temperature;
                let s = predict_logits(&self.cfg.student, &self.params, val)?;
                let t = self.anchor_val_logits(a)?.expect("val and teacher present");
                Some(mean_softened_kl(t, &s, tau)?)
            }
            _ => None,
        };
        let test_top1 = match self.data.test {
            Some(test) if !test.is_empty() => {
                let logits = predict_logits(&self.cfg.student, &self.params, test)?;
                Some(top1_from_logits(&logits, &test.labels)?)
            }
            _ => None,
        };
        if !self.params.is_finite() || !train_loss.is_finite() {
            return Err(Error::invalid(format!(
                "training diverged at epoch {} (loss {train_loss})",
                self.epoch
            )));
        }
        let record = EpochRecord {
            epoch: self.epoch,
            lr,
            train_loss,
            anchor_epoch: anchor.map(|a| a.epoch),
            val_kl,
            test_top1,
        };
        if let Some(obs) = self.observer.as_mut() {
            obs(&TrainEvent::EpochEnd {
                record: &record,
                params: &self.params,
            });
        }
        self.records.push(record);
        Ok(())
    }

    fn finish(self) -> RunReport<T> {
        let lr_policy = if self.stages <= 1 {
            LrPolicy::Single
        } else if self.continuous {
            LrPolicy::Continuous
        } else {
            LrPolicy::Restart
        };
        RunReport {
            seed: self.cfg.train.seed,
            lr_policy,
            anchors: self.anchors,
            switches: self.switches,
            epochs: self.records,
            hardness_tables: self.tables,
            optimizer_steps: self.steps,
            final_params: self.params,
            wall_clock: self.started.elapsed(),
        }
    }
}

/// Batch objective for a distillation step, including the optional hint
/// term and adapter update.
#[allow(clippy::too_many_arguments)]
fn distill_objective<T: Scalar>(
    cfg: &RcoRunConfig,
    teacher: &NetworkSpec,
    anchor: &Checkpoint<T>,
    cached_logits: Option<&Tensor<T>>,
    adapter: Option<&mut Adapter<T>>,
    lr: f64,
    batch: &Batch<T>,
    trace: &Trace<T>,
) -> Result<BatchLoss<T>> {
    let (teacher_logits, teacher_features) = match cached_logits {
        Some(all) => {
            let c = all.row_len();
            let mut rows = Vec::with_capacity(batch.indices.len() * c);
            for &i in &batch.indices {
                rows.extend_from_slice(all.row(i));
            }
            (Tensor::new(vec![batch.indices.len(), c], rows)?, None)
        }
        None => {
            let (l, f) = forward(teacher, &anchor.params, &batch.images)?;
            (l, Some(f))
        }
    };
    let (mut loss, logit_grad) = match cfg.loss_kind {
        LossKind::Hint => ce_loss(trace.logits(), &batch.labels)?,
        LossKind::Kd | LossKind::HintKd => {
            rco_step_loss(trace.logits(), &teacher_logits, &batch.labels, &cfg.distill)?
        }
    };
    let mut feature_grad = None;
    if let Some(ft) = teacher_features {
        let fs = flat_rows(trace.features())?;
        let ft = flat_rows(&ft)?;
        let w = T::from_f64_lossy(cfg.hint_weight);
        let grad_fs = match adapter {
            Some(a) => {
                let mapped = a.forward(&fs)?;
                let (m, mut g) = mimic_loss(&mapped, &ft)?;
                loss += w * m;
                g = g.map(|v| v * w);
                a.backward_step(&fs, &g, &cfg.train.sgd, lr)?
            }
            None => {
                let (m, g) = mimic_loss(&fs, &ft)?;
                loss += w * m;
                g.map(|v| v * w)
            }
        };
        feature_grad = Some(grad_fs.reshape(trace.features().shape().to_vec())?);
    }
    Ok(BatchLoss {
        loss,
        logit_grad,
        feature_grad,
    })
}

fn flat_rows<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let rows = t.rows();
    let width = t.len().checked_div(rows).unwrap_or(0);
    t.clone().reshape(vec![rows, width])
}
