//! Anchor selection: equal epoch intervals, the one-stage variant's switch
//! points, and greedy search over validation-set hardness.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fit::{mean_softened_kl, predict_logits};
use crate::nn::{NetworkSpec, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trajectory::{Checkpoint, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyMode {
    Kd,
    Eei,
    OneStageEei,
    Gs,
}

/// Ordered anchor epochs forming the curriculum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSchedule {
    pub mode: StrategyMode,
    /// Teacher epochs, strictly increasing. Empty for greedy search, whose
    /// anchors are chosen during training.
    pub anchor_epochs: Vec<u32>,
    /// One-stage only: student epoch (cumulative) at which each anchor's
    /// segment ends; the last entry is the total budget.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub switch_epochs: Vec<u32>,
}

impl AnchorSchedule {
    pub fn kd(final_epoch: u32) -> Self {
        Self {
            mode: StrategyMode::Kd,
            anchor_epochs: vec![final_epoch],
            switch_epochs: Vec::new(),
        }
    }

    pub fn eei(total_epochs: u32, gap: u32) -> Result<Self> {
        Ok(Self {
            mode: StrategyMode::Eei,
            anchor_epochs: eei_select(total_epochs, gap)?,
            switch_epochs: Vec::new(),
        })
    }

    /// One-stage EEI: anchors every `gap` teacher epochs, with switch points
    /// rescaled onto a student budget of `student_epochs`.
    pub fn one_stage_eei(teacher_epochs: u32, gap: u32, student_epochs: u32) -> Result<Self> {
        let anchors = eei_select(teacher_epochs, gap)?;
        let switch_epochs = scale_switches(&anchors, teacher_epochs, student_epochs)?;
        Ok(Self {
            mode: StrategyMode::OneStageEei,
            anchor_epochs: anchors,
            switch_epochs,
        })
    }

    pub fn gs() -> Self {
        Self {
            mode: StrategyMode::Gs,
            anchor_epochs: Vec::new(),
            switch_epochs: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode != StrategyMode::Gs && self.anchor_epochs.is_empty() {
            return Err(Error::invalid("anchor schedule is empty"));
        }
        if self.anchor_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("anchor epochs must be strictly increasing"));
        }
        if self.mode == StrategyMode::Kd && self.anchor_epochs.len() != 1 {
            return Err(Error::invalid("KD uses exactly one anchor"));
        }
        if self.mode == StrategyMode::OneStageEei {
            if self.switch_epochs.len() != self.anchor_epochs.len() {
                return Err(Error::invalid("one switch epoch per anchor is required"));
            }
            if self.switch_epochs.first() == Some(&0)
                || self.switch_epochs.windows(2).any(|w| w[0] >= w[1])
            {
                return Err(Error::invalid("switch epochs must be positive and strictly increasing"));
            }
        }
        Ok(())
    }
}

/// `{gap, 2 gap, ...} ∪ {total_epochs}`.
pub fn eei_select(total_epochs: u32, gap: u32) -> Result<Vec<u32>> {
    if gap == 0 || gap > total_epochs {
        return Err(Error::invalid(format!(
            "gap {gap} must be in [1, {total_epochs}]"
        )));
    }
    let mut epochs: Vec<u32> = (1..=total_epochs / gap).map(|k| k * gap).collect();
    if epochs.last() != Some(&total_epochs) {
        epochs.push(total_epochs);
    }
    Ok(epochs)
}

/// Map teacher anchor epochs onto a student budget proportionally
/// (identity when the budgets match).
pub fn scale_switches(anchors: &[u32], teacher_epochs: u32, student_epochs: u32) -> Result<Vec<u32>> {
    if teacher_epochs == 0 || student_epochs == 0 {
        return Err(Error::invalid("epoch budgets must be >= 1"));
    }
    let mut out: Vec<u32> = Vec::with_capacity(anchors.len());
    for &a in anchors {
        let s = ((u64::from(a) * u64::from(student_epochs)) / u64::from(teacher_epochs)) as u32;
        out.push(s);
    }
    if let Some(last) = out.last_mut() {
        *last = student_epochs;
    }
    if out.first() == Some(&0) || out.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!(
            "{} anchors cannot be spread over {student_epochs} student epochs",
            anchors.len()
        )));
    }
    Ok(out)
}

/// Validation KL between the anchor's and the student's softened outputs.
pub fn hardness<T: Scalar>(
    student_spec: &NetworkSpec,
    student: &Params<T>,
    teacher_spec: &NetworkSpec,
    anchor: &Checkpoint<T>,
    val: &Dataset<T>,
    tau: f64,
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::invalid("hardness needs a non-empty validation set"));
    }
    let s = predict_logits(student_spec, student, val)?;
    let t = predict_logits(teacher_spec, &anchor.params, val)?;
    mean_softened_kl(&t, &s, tau)
}

/// Hardness from precomputed logits on the same examples.
pub fn hardness_from_logits<T: Scalar>(
    student_logits: &Tensor<T>,
    anchor_logits: &Tensor<T>,
    tau: f64,
) -> Result<f64> {
    mean_softened_kl(anchor_logits, student_logits, tau)
}

/// `(h_j - h_i) / h_i`; `+inf` when only `h_i` is zero, `0` when both are.
pub fn hardness_ratio(h_i: f64, h_j: f64) -> Result<f64> {
    if !(h_i >= 0.0 && h_j >= 0.0) {
        return Err(Error::invalid(format!(
            "hardness values must be >= 0, got {h_i} and {h_j}"
        )));
    }
    Ok(if h_i == 0.0 {
        if h_j == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (h_j - h_i) / h_i
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsConfig {
    /// Ratio threshold above which a later anchor counts as too hard.
    pub delta: f64,
    /// Student epochs trained per selected anchor; `None` uses the student's
    /// full schedule.
    #[serde(default)]
    pub stage_epochs: Option<u32>,
}

impl Default for GsConfig {
    fn default() -> Self {
        Self {
            delta: 0.8,
            stage_epochs: None,
        }
    }
}

impl GsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta.is_nan() || self.delta <= 0.0 {
            return Err(Error::invalid("delta must be > 0"));
        }
        if self.stage_epochs == Some(0) {
            return Err(Error::invalid("stage_epochs must be >= 1"));
        }
        Ok(())
    }
}

/// Greedy scan over anchor indices `0..n` starting from the current index
/// `i` with hardness `h_i`. `h_of(j)` is only called for the anchors the scan
/// visits. Returns the index just before the first anchor whose ratio
/// exceeds `delta`, never less than `i + 1`; `n - 1` when none does.
pub fn greedy_scan(
    n: usize,
    i: usize,
    h_i: f64,
    delta: f64,
    mut h_of: impl FnMut(usize) -> Result<f64>,
) -> Result<usize> {
    if i + 1 >= n {
        return Err(Error::invalid(format!(
            "current anchor {i} has no successor among {n} anchors"
        )));
    }
    let mut j = i + 1;
    while j < n - 1 {
        let r = hardness_ratio(h_i, h_of(j)?)?;
        if r > delta {
            return Ok((j - 1).max(i + 1));
        }
        j += 1;
    }
    Ok(n - 1)
}

/// Hardness values and ratios observed during one greedy step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardnessTable {
    pub current_epoch: u32,
    /// Anchor epoch -> H.
    pub h_values: BTreeMap<u32, f64>,
    /// Anchor epoch j -> r(current, j).
    pub ratios: BTreeMap<u32, f64>,
    pub selected_epoch: u32,
}

impl HardnessTable {
    /// CSV with columns `anchor_epoch,H,r_from_current`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("anchor_epoch,H,r_from_current\n");
        for (&epoch, &h) in &self.h_values {
            let r = self
                .ratios
                .get(&epoch)
                .map(|r| r.to_string())
                .unwrap_or_default();
            let _ = writeln!(s, "{epoch},{h},{r}");
        }
        s
    }
}

/// Result of one greedy-search step.
#[derive(Debug, Clone, PartialEq)]
pub struct GsStep {
    pub next: usize,
    pub table: HardnessTable,
}

/// Choose the next anchor index for a student that has just finished
/// mimicking anchor `current`.
pub fn greedy_next_anchor<T: Scalar>(
    student_spec: &NetworkSpec,
    student: &Params<T>,
    trajectory: &Trajectory<T>,
    current: usize,
    cfg: &GsConfig,
    val: &Dataset<T>,
    tau: f64,
) -> Result<GsStep> {
    let student_logits = predict_logits(student_spec, student, val)?;
    greedy_next_with(
        &student_logits,
        trajectory,
        current,
        cfg,
        tau,
        |idx| predict_logits(&trajectory.spec, &trajectory.checkpoints[idx].params, val),
    )
}

/// As [`greedy_next_anchor`] with precomputed student logits and a source
/// of anchor logits on the same validation examples.
pub(crate) fn greedy_next_with<T: Scalar>(
    student_logits: &Tensor<T>,
    trajectory: &Trajectory<T>,
    current: usize,
    cfg: &GsConfig,
    tau: f64,
    mut anchor_logits: impl FnMut(usize) -> Result<Tensor<T>>,
) -> Result<GsStep> {
    cfg.validate()?;
    let cps = &trajectory.checkpoints;
    let mut h_values = BTreeMap::new();
    let mut ratios = BTreeMap::new();
    let h_i = hardness_from_logits(student_logits, &anchor_logits(current)?, tau)?;
    h_values.insert(cps[current].epoch, h_i);
    let next = greedy_scan(cps.len(), current, h_i, cfg.delta, |j| {
        let h = hardness_from_logits(student_logits, &anchor_logits(j)?, tau)?;
        h_values.insert(cps[j].epoch, h);
        ratios.insert(cps[j].epoch, hardness_ratio(h_i, h)?);
        Ok(h)
    })?;
    Ok(GsStep {
        next,
        table: HardnessTable {
            current_epoch: cps[current].epoch,
            h_values,
            ratios,
            selected_epoch: cps[next].epoch,
        },
    })
}
