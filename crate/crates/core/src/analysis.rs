//! Evaluation and diagnostics: accuracy, KL against every teacher epoch,
//! PCA projection of a parameter trajectory, and input-noise robustness.

use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fit::{predict_logits, EVAL_CHUNK};
use crate::losses::{cross_entropy, kd_loss, softened_softmax, DistillConfig};
use crate::nn::{forward, NetworkSpec, Params};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::scalar::Scalar;
use crate::strategy::hardness_from_logits;
use crate::tensor::Tensor;
use crate::trajectory::Trajectory;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn top1_from_logits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("top-1 of an empty dataset"));
    }
    if logits.rows() != labels.len() {
        return Err(Error::shape("logit rows", &[labels.len()], &[logits.rows()]));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(logits.row(i)) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn top1<T: Scalar>(spec: &NetworkSpec, params: &Params<T>, d: &Dataset<T>) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::invalid("top-1 of an empty dataset"));
    }
    top1_from_logits(&predict_logits(spec, params, d)?, &d.labels)
}

/// Mean cross-entropy of the model over `d`.
pub fn mean_ce<T: Scalar>(spec: &NetworkSpec, params: &Params<T>, d: &Dataset<T>) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::invalid("loss of an empty dataset"));
    }
    let mut total = 0.0;
    for (images, labels) in d.chunks(EVAL_CHUNK) {
        let (logits, _) = forward(spec, params, &images)?;
        total += chunk_ce(&logits, &labels)? * labels.len() as f64;
    }
    Ok(total / d.len() as f64)
}

fn chunk_ce<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy(&softened_softmax(logits, 1.0)?, labels)?.to_f64_lossy())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlCurve {
    pub tag: String,
    pub teacher_epochs: Vec<u32>,
    pub kl: Vec<f64>,
}

impl KlCurve {
    /// CSV with columns `teacher_epoch,kl`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("teacher_epoch,kl\n");
        for (e, k) in self.teacher_epochs.iter().zip(&self.kl) {
            let _ = writeln!(s, "{e},{k}");
        }
        s
    }
}

/// Validation hardness of one student against every checkpoint.
pub fn kl_curve<T: Scalar>(
    student_spec: &NetworkSpec,
    student: &Params<T>,
    trajectory: &Trajectory<T>,
    val: &Dataset<T>,
    tau: f64,
    tag: &str,
) -> Result<KlCurve> {
    if trajectory.checkpoints.is_empty() {
        return Err(Error::invalid("trajectory has no checkpoints"));
    }
    if val.is_empty() {
        return Err(Error::invalid("KL curve needs a non-empty validation set"));
    }
    let s = predict_logits(student_spec, student, val)?;
    let mut kl = Vec::with_capacity(trajectory.checkpoints.len());
    for cp in &trajectory.checkpoints {
        let t = predict_logits(&trajectory.spec, &cp.params, val)?;
        kl.push(hardness_from_logits(&s, &t, tau)?);
    }
    Ok(KlCurve {
        tag: tag.to_string(),
        teacher_epochs: trajectory.epochs(),
        kl,
    })
}

/// Two-dimensional projection of a parameter trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryProjection {
    pub labels: Vec<String>,
    pub coords: Vec<[f64; 2]>,
    /// Share of the squared singular values captured by each direction.
    pub explained: [f64; 2],
}

impl TrajectoryProjection {
    pub fn with_labels(mut self, labels: impl IntoIterator<Item = impl ToString>) -> Self {
        let labels: Vec<String> = labels.into_iter().map(|l| l.to_string()).collect();
        if labels.len() == self.coords.len() {
            self.labels = labels;
        }
        self
    }

    /// CSV with columns `point,pc1,pc2`; the explained fractions follow in a
    /// comment line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("point,pc1,pc2\n");
        for (l, c) in self.labels.iter().zip(&self.coords) {
            let _ = writeln!(s, "{l},{},{}", c[0], c[1]);
        }
        let _ = writeln!(s, "# explained,{},{}", self.explained[0], self.explained[1]);
        s
    }
}

/// Project every parameter set onto the top two principal directions of
/// the differences to the last one.
pub fn pca_trajectory<T: Scalar>(checkpoints: &[Params<T>]) -> Result<TrajectoryProjection> {
    if checkpoints.len() < 3 {
        return Err(Error::invalid(format!(
            "PCA needs at least 3 checkpoints, got {}",
            checkpoints.len()
        )));
    }
    let last = checkpoints.last().expect("non-empty");
    for (k, p) in checkpoints.iter().enumerate() {
        p.check_same_layout(last, &format!("checkpoint {k}"))?;
    }
    let final_flat: Vec<f64> = last.flatten().iter().map(|v| v.to_f64_lossy()).collect();
    let diffs: Vec<Vec<f64>> = checkpoints
        .iter()
        .map(|p| {
            p.flatten()
                .iter()
                .zip(&final_flat)
                .map(|(v, f)| v.to_f64_lossy() - f)
                .collect()
        })
        .collect();
    pca_rows(&diffs[..diffs.len() - 1], &diffs)
}

/// Top-2 directions of the row space of `rows` (uncentered), and the
/// projections of `points` onto them.
pub fn pca_rows(rows: &[Vec<f64>], points: &[Vec<f64>]) -> Result<TrajectoryProjection> {
    let m = rows.len();
    let dim = rows.first().map_or(0, Vec::len);
    if m == 0 || dim == 0 {
        return Err(Error::invalid("PCA of an empty matrix"));
    }
    if rows.iter().chain(points).any(|r| r.len() != dim) {
        return Err(Error::invalid("PCA rows have different lengths"));
    }
    let dotv = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let g = dotv(&rows[i], &rows[j]);
            gram[i * m + j] = g;
            gram[j * m + i] = g;
        }
    }
    let (values, vectors) = symmetric_eigen(&gram, m);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let tol = total * 1e-12;
    let mut directions: Vec<Option<Vec<f64>>> = Vec::with_capacity(2);
    let mut explained = [0.0; 2];
    for (slot, &k) in order.iter().take(2).enumerate() {
        let lambda = values[k];
        if lambda <= tol || total == 0.0 {
            directions.push(None);
            continue;
        }
        let mut v = vec![0.0; dim];
        for (i, row) in rows.iter().enumerate() {
            let u = vectors[i * m + k];
            for (vd, &r) in v.iter_mut().zip(row) {
                *vd += u * r;
            }
        }
        let norm = dotv(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        explained[slot] = lambda / total;
        directions.push(Some(v));
    }
    while directions.len() < 2 {
        directions.push(None);
    }
    let mut coords: Vec<[f64; 2]> = points
        .iter()
        .map(|p| {
            let mut c = [0.0; 2];
            for (slot, d) in directions.iter().enumerate() {
                if let Some(d) = d {
                    c[slot] = dotv(p, d);
                }
            }
            c
        })
        .collect();
    // Deterministic orientation: the first point with a nonzero coordinate
    // on an axis lies on its positive side.
    for axis in 0..2 {
        if let Some(first) = coords.iter().map(|c| c[axis]).find(|&v| v != 0.0) {
            if first < 0.0 {
                coords.iter_mut().for_each(|c| c[axis] = -c[axis] + 0.0);
            }
        }
    }
    Ok(TrajectoryProjection {
        labels: (0..points.len()).map(|i| i.to_string()).collect(),
        coords,
        explained,
    })
}

/// Cyclic Jacobi eigen-decomposition of a symmetric `n x n` row-major
/// matrix. Returns eigenvalues and the eigenvectors as columns.
fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// A model to evaluate: architecture plus parameters.
#[derive(Debug, Clone, Copy)]
pub struct Model<'a, T> {
    pub spec: &'a NetworkSpec,
    pub params: &'a Params<T>,
}

/// Teacher used to report each model's distillation loss alongside CE.
#[derive(Debug, Clone, Copy)]
pub struct NoiseTeacher<'a, T> {
    pub model: Model<'a, T>,
    pub distill: &'a DistillConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweep {
    pub deltas: Vec<f64>,
    pub loss_a: Vec<f64>,
    pub loss_b: Vec<f64>,
    /// `loss_a - loss_b` per delta.
    pub delta_loss: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd_loss_a: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd_loss_b: Option<Vec<f64>>,
}

impl NoiseSweep {
    /// CSV with columns `delta,loss_a,loss_b,delta_loss` and, when a teacher
    /// was given, `kd_loss_a,kd_loss_b`.
    pub fn to_csv(&self) -> String {
        let kd = self.kd_loss_a.as_ref().zip(self.kd_loss_b.as_ref());
        let mut s = String::from("delta,loss_a,loss_b,delta_loss");
        if kd.is_some() {
            s.push_str(",kd_loss_a,kd_loss_b");
        }
        s.push('\n');
        for i in 0..self.deltas.len() {
            let _ = write!(
                s,
                "{},{},{},{}",
                self.deltas[i], self.loss_a[i], self.loss_b[i], self.delta_loss[i]
            );
            if let Some((a, b)) = kd {
                let _ = write!(s, ",{},{}", a[i], b[i]);
            }
            s.push('\n');
        }
        s
    }
}

/// `0.0, 0.1, ..., 1.0`.
pub fn default_deltas() -> Vec<f64> {
    (0..=10).map(|k| f64::from(k) / 10.0).collect()
}

/// Add per-image Gaussian noise with standard deviation `sigma_in * delta`,
/// where `sigma_in` is the image's own pixel standard deviation, and
/// evaluate both models on the same noisy inputs.
pub fn noise_sweep<T: Scalar>(
    a: Model<'_, T>,
    b: Model<'_, T>,
    d: &Dataset<T>,
    deltas: &[f64],
    seed: u64,
    teacher: Option<NoiseTeacher<'_, T>>,
) -> Result<NoiseSweep> {
    if d.is_empty() {
        return Err(Error::invalid("noise sweep needs a non-empty dataset"));
    }
    if deltas.is_empty() {
        return Err(Error::invalid("noise sweep needs at least one delta"));
    }
    if deltas.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::invalid("deltas must lie in [0, 1]"));
    }
    if deltas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("deltas must be sorted ascending"));
    }
    if let Some(t) = &teacher {
        t.distill.validate()?;
    }
    let n = d.len();
    let sigmas = image_stds(d);
    let mut out = NoiseSweep {
        deltas: deltas.to_vec(),
        loss_a: Vec::new(),
        loss_b: Vec::new(),
        delta_loss: Vec::new(),
        kd_loss_a: teacher.as_ref().map(|_| Vec::new()),
        kd_loss_b: teacher.as_ref().map(|_| Vec::new()),
    };
    for &delta in deltas {
        let mut rng = rng_from_seed(derive_seed(seed, stream::NOISE));
        let (mut la, mut lb, mut ka, mut kb) = (0.0, 0.0, 0.0, 0.0);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let (mut images, labels) = d.gather(&idx);
            let width = images.row_len();
            for (r, row) in images.data_mut().chunks_mut(width).enumerate() {
                let sigma = sigmas[start + r] * delta;
                for px in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if delta != 0.0 {
                        *px += T::from_f64_lossy(sigma * z);
                    }
                }
            }
            let weight = labels.len() as f64;
            let (za, _) = forward(a.spec, a.params, &images)?;
            let (zb, _) = forward(b.spec, b.params, &images)?;
            la += chunk_ce(&za, &labels)? * weight;
            lb += chunk_ce(&zb, &labels)? * weight;
            if let Some(t) = &teacher {
                let (zt, _) = forward(t.model.spec, t.model.params, &images)?;
                ka += kd_loss(&za, &zt, &labels, t.distill)?.0.to_f64_lossy() * weight;
                kb += kd_loss(&zb, &zt, &labels, t.distill)?.0.to_f64_lossy() * weight;
            }
        }
        let (la, lb) = (la / n as f64, lb / n as f64);
        out.loss_a.push(la);
        out.loss_b.push(lb);
        out.delta_loss.push(la - lb);
        if let (Some(a), Some(b)) = (out.kd_loss_a.as_mut(), out.kd_loss_b.as_mut()) {
            a.push(ka / n as f64);
            b.push(kb / n as f64);
        }
    }
    Ok(out)
}

/// Population standard deviation of each image's values.
fn image_stds<T: Scalar>(d: &Dataset<T>) -> Vec<f64> {
    let width = d.images.row_len();
    d.images
        .data()
        .chunks(width)
        .map(|row| {
            let mean = row.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / width as f64;
            let var = row
                .iter()
                .map(|v| (v.to_f64_lossy() - mean).powi(2))
                .sum::<f64>()
                / width as f64;
            var.sqrt()
        })
        .collect()
}
