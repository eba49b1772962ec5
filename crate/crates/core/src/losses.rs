//! Distillation objectives and their gradients with respect to logits.
//!
//! All batch losses are means over the leading dimension.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-stochastic `(batch, classes)` matrix with entries in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch<T> {
    probs: Tensor<T>,
}

impl<T: Scalar> ProbBatch<T> {
    /// Wrap an existing probability matrix, checking the row-sum invariant.
    pub fn new(probs: Tensor<T>) -> Result<Self> {
        if probs.shape().len() != 2 {
            return Err(Error::invalid("probabilities must be (batch, classes)"));
        }
        let tol = T::from_f64_lossy(1e-5);
        for r in 0..probs.rows() {
            let row = probs.row(r);
            if row.iter().any(|&p| !(p > T::zero() && p <= T::one())) {
                return Err(Error::invalid(format!("row {r} has entries outside (0, 1]")));
            }
            let s: T = row.iter().copied().sum();
            if (s - T::one()).abs() > tol {
                return Err(Error::invalid(format!("row {r} sums to {s}, not 1")));
            }
        }
        Ok(Self { probs })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.probs
    }

    pub fn rows(&self) -> usize {
        self.probs.rows()
    }

    pub fn classes(&self) -> usize {
        self.probs.row_len()
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.probs.row(i)
    }
}

/// Knobs of the teacher-student objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Softmax temperature applied to both teacher and student in the KL term.
    pub temperature: f64,
    /// Weight of the KL term relative to the hard-label cross-entropy.
    pub lambda: f64,
    /// Multiply the KL term by `temperature^2` so its gradient scale does not
    /// shrink with the temperature.
    pub kl_grad_scale: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 5.0,
            lambda: 1.0,
            kl_grad_scale: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be > 0"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be >= 0"));
        }
        Ok(())
    }

    fn kl_weight(&self) -> f64 {
        if self.kl_grad_scale {
            self.lambda * self.temperature * self.temperature
        } else {
            self.lambda
        }
    }
}

/// Row-wise `softmax(logits / tau)` with max subtraction. Entries are floored
/// at the smallest positive normal so logarithms stay finite.
pub fn softened_softmax<T: Scalar>(logits: &Tensor<T>, tau: f64) -> Result<ProbBatch<T>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    if logits.shape().len() != 2 {
        return Err(Error::invalid("logits must be (batch, classes)"));
    }
    let inv_tau = T::one() / T::from_f64_lossy(tau);
    let floor = T::min_positive_value();
    let mut probs = logits.clone();
    for r in 0..probs.rows() {
        let row = probs.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - max) * inv_tau).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = (*v / sum).max(floor);
        }
    }
    Ok(ProbBatch { probs })
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape("labels", &[rows], &[labels.len()]));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::invalid(format!(
            "label {l} at row {i} outside [0, {classes})"
        )));
    }
    Ok(())
}

/// Mean of `-ln p[label]`.
pub fn cross_entropy<T: Scalar>(probs: &ProbBatch<T>, labels: &[usize]) -> Result<T> {
    check_labels(labels, probs.rows(), probs.classes())?;
    let mut total = T::zero();
    for (r, &l) in labels.iter().enumerate() {
        total -= probs.row(r)[l].ln();
    }
    Ok(total / T::from_usize(probs.rows().max(1)).expect("batch size fits"))
}

/// Mean over rows of `sum p (ln p - ln q)`.
pub fn kl_divergence<T: Scalar>(p: &ProbBatch<T>, q: &ProbBatch<T>) -> Result<T> {
    p.tensor().ensure_shape("kl_divergence q", q.tensor().shape())?;
    let mut total = T::zero();
    for r in 0..p.rows() {
        let mut row = T::zero();
        for (&pi, &qi) in p.row(r).iter().zip(q.row(r)) {
            row += pi * (pi.ln() - qi.ln());
        }
        total += row;
    }
    Ok(total / T::from_usize(p.rows().max(1)).expect("batch size fits"))
}

/// Hard-label cross-entropy on the raw student logits plus the weighted,
/// temperature-softened KL from the teacher distribution to the student's.
/// Returns the loss and its gradient with respect to the student logits.
pub fn kd_loss<T: Scalar>(
    student_logits: &Tensor<T>,
    teacher_logits: &Tensor<T>,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<(T, Tensor<T>)> {
    cfg.validate()?;
    teacher_logits.ensure_shape("teacher logits", student_logits.shape())?;
    let (ce, mut grad) = ce_loss(student_logits, labels)?;
    if cfg.lambda == 0.0 {
        return Ok((ce, grad));
    }
    let ps = softened_softmax(student_logits, cfg.temperature)?;
    let pt = softened_softmax(teacher_logits, cfg.temperature)?;
    let kl = kl_divergence(&pt, &ps)?;
    let weight = T::from_f64_lossy(cfg.kl_weight());
    // d/dz_s KL(pt || ps) = (ps - pt) / tau per row.
    let n = T::from_usize(ps.rows().max(1)).expect("batch size fits");
    let coef = weight / (T::from_f64_lossy(cfg.temperature) * n);
    for ((g, &s), &t) in grad
        .data_mut()
        .iter_mut()
        .zip(ps.tensor().data())
        .zip(pt.tensor().data())
    {
        *g += coef * (s - t);
    }
    Ok((ce + weight * kl, grad))
}

/// Cross-entropy of `softmax(logits)` and its logit gradient.
pub fn ce_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let probs = softened_softmax(logits, 1.0)?;
    let loss = cross_entropy(&probs, labels)?;
    let n = T::from_usize(probs.rows().max(1)).expect("batch size fits");
    let classes = probs.classes();
    let mut grad = probs.probs;
    for (r, &l) in labels.iter().enumerate() {
        let row = &mut grad.data_mut()[r * classes..(r + 1) * classes];
        row[l] -= T::one();
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    Ok((loss, grad))
}

/// Per-anchor objective of sequential distillation: the KD objective with the
/// anchor checkpoint's logits as the teacher signal.
pub fn rco_step_loss<T: Scalar>(
    student_logits: &Tensor<T>,
    anchor_logits: &Tensor<T>,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<(T, Tensor<T>)> {
    kd_loss(student_logits, anchor_logits, labels, cfg)
}

/// `1/n * sum_i ||f_s,i - f_t,i||^2` and its gradient `2 (f_s - f_t) / n`.
pub fn mimic_loss<T: Scalar>(f_s: &Tensor<T>, f_t: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    f_t.ensure_shape("mimic target features", f_s.shape())?;
    let n = T::from_usize(f_s.rows().max(1)).expect("batch size fits");
    let two = T::one() + T::one();
    let mut total = T::zero();
    let mut grad = f_s.clone();
    for (g, &t) in grad.data_mut().iter_mut().zip(f_t.data()) {
        let d = *g - t;
        total += d * d;
        *g = two * d / n;
    }
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn probs(rows: &[&[f32]]) -> ProbBatch<f32> {
        let classes = rows[0].len();
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        ProbBatch::new(t(&[rows.len(), classes], &data)).unwrap()
    }

    #[test]
    fn softmax_closed_forms() {
        let p = softened_softmax(&t(&[1, 2], &[0.0, 0.0]), 3.0).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
        let p = softened_softmax(&t(&[1, 2], &[1.0, 0.0]), 1.0).unwrap();
        assert!((p.row(0)[0] - 0.73106).abs() < 1e-4);
        assert!((p.row(0)[1] - 0.26894).abs() < 1e-4);
        let p = softened_softmax(&t(&[1, 2], &[10.0, 0.0]), 1e6).unwrap();
        assert!(p.row(0).iter().all(|&v| (v - 0.5).abs() < 1e-5));
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        assert!(softened_softmax(&t(&[1, 2], &[0.0, 1.0]), 0.0).is_err());
        assert!(softened_softmax(&t(&[1, 2], &[0.0, 1.0]), -1.0).is_err());
    }

    #[test]
    fn softmax_extreme_logits_stay_positive() {
        let p = softened_softmax(&t(&[1, 3], &[1000.0, -1000.0, 0.0]), 1.0).unwrap();
        assert!(p.row(0).iter().all(|&v| v > 0.0 && v.is_finite()));
        let ce = cross_entropy(&p, &[1]).unwrap();
        assert!(ce.is_finite());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let p = probs(&[&[1.0 - 1e-7, 1e-7]]);
        assert!(cross_entropy(&p, &[0]).unwrap() < 2e-7);
        let p = probs(&[&[0.1; 10]]);
        assert!((cross_entropy(&p, &[3]).unwrap() - std::f32::consts::LN_10).abs() < 1e-4);
        assert!(cross_entropy(&p, &[10]).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let p = probs(&[&[0.2, 0.3, 0.5], &[0.6, 0.3, 0.1]]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let eps = 1e-9f32;
        let p = ProbBatch::new(t(&[1, 2], &[1.0 - eps, eps])).unwrap();
        let q = probs(&[&[0.5, 0.5]]);
        assert!((kl_divergence(&p, &q).unwrap() - std::f32::consts::LN_2).abs() < 1e-4);
        let r = probs(&[&[0.5, 0.25, 0.25]]);
        assert!(kl_divergence(&q, &r).is_err());
    }

    #[test]
    fn kd_with_zero_lambda_is_cross_entropy() {
        let zs = t(&[2, 3], &[0.3, -1.2, 2.0, 0.0, 0.5, -0.5]);
        let zt = t(&[2, 3], &[1.0, 1.0, -3.0, 2.0, 0.1, 0.0]);
        let cfg = DistillConfig {
            lambda: 0.0,
            ..DistillConfig::default()
        };
        let (loss, _) = kd_loss(&zs, &zt, &[2, 1], &cfg).unwrap();
        let ce = cross_entropy(&softened_softmax(&zs, 1.0).unwrap(), &[2, 1]).unwrap();
        assert_eq!(loss.to_bits(), ce.to_bits());
    }

    #[test]
    fn kd_with_identical_logits_is_cross_entropy() {
        let zs = t(&[2, 3], &[0.3, -1.2, 2.0, 0.0, 0.5, -0.5]);
        let (loss, _) = kd_loss(&zs, &zs, &[0, 1], &DistillConfig::default()).unwrap();
        let ce = cross_entropy(&softened_softmax(&zs, 1.0).unwrap(), &[0, 1]).unwrap();
        assert_eq!(loss, ce);
    }

    #[test]
    fn rco_with_same_anchor_equals_kd() {
        let zs = t(&[1, 3], &[0.3, -1.2, 2.0]);
        let zt = t(&[1, 3], &[1.0, 1.0, -3.0]);
        let cfg = DistillConfig::default();
        let a = kd_loss(&zs, &zt, &[0], &cfg).unwrap();
        let b = rco_step_loss(&zs, &zt, &[0], &cfg).unwrap();
        assert_eq!(a, b);
        let other = t(&[1, 3], &[0.0, 2.0, -3.0]);
        let c = rco_step_loss(&zs, &other, &[0], &cfg).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn mimic_closed_forms() {
        let a = t(&[1, 2], &[1.0, 1.0]);
        let b = t(&[1, 2], &[0.0, 0.0]);
        assert_eq!(mimic_loss(&a, &b).unwrap().0, 2.0);
        assert_eq!(mimic_loss(&a, &a).unwrap().0, 0.0);
        assert_eq!(mimic_loss(&a, &b).unwrap().0, mimic_loss(&b, &a).unwrap().0);
        assert_eq!(mimic_loss(&a, &b).unwrap().1.data(), &[2.0, 2.0]);
        assert!(mimic_loss(&a, &t(&[2, 1], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn prob_batch_invariants_enforced() {
        assert!(ProbBatch::new(t(&[1, 2], &[0.7, 0.7])).is_err());
        assert!(ProbBatch::new(t(&[1, 2], &[1.0, 0.0])).is_err());
    }
}
