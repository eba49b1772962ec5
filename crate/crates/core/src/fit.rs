use crate::data::{batch_iter, Batch, Dataset};
use crate::error::Result;
use crate::nn::{forward_trace, sgd_step, NetworkSpec, Params, SgdConfig, Trace};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-batch objective: loss, gradient at the logits and an optional
/// gradient at the feature tap.
pub(crate) struct BatchLoss<T> {
    pub loss: T,
    pub logit_grad: Tensor<T>,
    pub feature_grad: Option<Tensor<T>>,
}

/// Seed of the shuffle for `epoch` of a run seeded with `seed`.
pub(crate) fn epoch_seed(seed: u64, epoch: u32) -> u64 {
    derive_seed(seed, 0x1_0000 + u64::from(epoch))
}

/// One pass over `data` with SGD; returns the example-weighted mean loss.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_epoch<T: Scalar>(
    spec: &NetworkSpec,
    params: &mut Params<T>,
    velocity: &mut Params<T>,
    data: &Dataset<T>,
    batch_size: usize,
    shuffle_seed: u64,
    sgd: &SgdConfig,
    lr: f64,
    mut objective: impl FnMut(&Batch<T>, &Trace<T>) -> Result<BatchLoss<T>>,
) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for batch in batch_iter(data, batch_size, shuffle_seed) {
        let trace = forward_trace(spec, params, &batch.images)?;
        let out = objective(&batch, &trace)?;
        let grads = trace.backward(spec, params, &out.logit_grad, out.feature_grad.as_ref())?;
        sgd_step(params, velocity, &grads, sgd, lr)?;
        total += out.loss.to_f64_lossy() * batch.indices.len() as f64;
        count += batch.indices.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Logits of `spec` over every example of `data`, in dataset order.
pub(crate) fn predict_logits<T: Scalar>(
    spec: &NetworkSpec,
    params: &Params<T>,
    data: &Dataset<T>,
) -> Result<Tensor<T>> {
    let mut out = Vec::with_capacity(data.len() * spec.num_classes);
    for (images, _) in data.chunks(EVAL_CHUNK) {
        let (logits, _) = crate::nn::forward(spec, params, &images)?;
        out.extend_from_slice(logits.data());
    }
    Tensor::new(vec![data.len(), spec.num_classes], out)
}

pub(crate) const EVAL_CHUNK: usize = 1000;

/// Mean softened KL(teacher || student) over all rows, evaluated chunk by
/// chunk with `losses::kl_divergence` and combined in `f64`.
pub(crate) fn mean_softened_kl<T: Scalar>(
    teacher_logits: &Tensor<T>,
    student_logits: &Tensor<T>,
    tau: f64,
) -> Result<f64> {
    use crate::losses::{kl_divergence, softened_softmax};
    teacher_logits.ensure_shape("teacher logits", student_logits.shape())?;
    let n = teacher_logits.rows();
    if n == 0 {
        return Err(crate::Error::invalid("KL over an empty set"));
    }
    let c = teacher_logits.row_len();
    let mut total = 0.0f64;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let slice = |t: &Tensor<T>| {
            Tensor::new(vec![end - start, c], t.data()[start * c..end * c].to_vec())
        };
        let pt = softened_softmax(&slice(teacher_logits)?, tau)?;
        let ps = softened_softmax(&slice(student_logits)?, tau)?;
        total += kl_divergence(&pt, &ps)?.to_f64_lossy() * (end - start) as f64;
    }
    Ok(total / n as f64)
}
