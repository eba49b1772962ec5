use super::kernels::{self, ConvDims};
use super::params::Params;
use super::spec::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Activations of one forward pass: `acts[0]` is the input batch and
/// `acts[k + 1]` the output of layer `k`.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    acts: Vec<Tensor<T>>,
    feature_tap: usize,
}

impl<T: Scalar> Trace<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.acts.last().expect("trace holds at least the input")
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.acts[self.feature_tap + 1]
    }

    /// Input batch followed by every layer's output.
    pub fn activations(&self) -> &[Tensor<T>] {
        &self.acts
    }

    pub fn into_outputs(mut self) -> (Tensor<T>, Tensor<T>) {
        let logits = self.acts.pop().expect("non-empty trace");
        let features = if self.feature_tap + 1 == self.acts.len() {
            logits.clone()
        } else {
            self.acts.swap_remove(self.feature_tap + 1)
        };
        (logits, features)
    }

    /// Backpropagate `logit_grad` (and optionally a gradient arriving at the
    /// feature tap) to parameter gradients.
    pub fn backward(
        &self,
        spec: &NetworkSpec,
        params: &Params<T>,
        logit_grad: &Tensor<T>,
        feature_grad: Option<&Tensor<T>>,
    ) -> Result<Params<T>> {
        logit_grad.ensure_shape("logit gradient", self.logits().shape())?;
        if let Some(fg) = feature_grad {
            fg.ensure_shape("feature gradient", self.features().shape())?;
        }
        let batch = self.acts[0].rows();
        let first_param = spec.layers.iter().position(LayerSpec::has_params);
        let mut grads = Params::zeros(spec);
        let mut g: Vec<T> = logit_grad.data().to_vec();

        for k in (0..spec.layers.len()).rev() {
            if k == spec.feature_tap {
                if let Some(fg) = feature_grad {
                    for (gi, &fi) in g.iter_mut().zip(fg.data()) {
                        *gi += fi;
                    }
                }
            }
            // Nothing upstream needs a gradient.
            if first_param.is_none_or(|f| k < f) {
                break;
            }
            let want_input = first_param.is_some_and(|f| k > f);
            let input = &self.acts[k];
            let in_shape = input.shape();
            g = match spec.layers[k] {
                LayerSpec::Dense { fan_in, fan_out } => {
                    let p = params.layers[k].as_ref().expect("validated layout");
                    let gp = grads.layers[k].as_mut().expect("validated layout");
                    let (gw, gb) = (&mut gp.weight, &mut gp.bias);
                    match kernels::dense_backward(
                        input.data(),
                        p.weight.data(),
                        &g,
                        batch,
                        fan_in,
                        fan_out,
                        gw.data_mut(),
                        gb.data_mut(),
                        want_input,
                    ) {
                        Some(gx) => gx,
                        None => break,
                    }
                }
                LayerSpec::Conv3x3 { fan_in, fan_out } => {
                    let p = params.layers[k].as_ref().expect("validated layout");
                    let gp = grads.layers[k].as_mut().expect("validated layout");
                    let d = ConvDims {
                        batch,
                        c_in: fan_in,
                        c_out: fan_out,
                        h: in_shape[2],
                        w: in_shape[3],
                    };
                    let (gw, gb) = (&mut gp.weight, &mut gp.bias);
                    match kernels::conv3x3_backward(
                        input.data(),
                        p.weight.data(),
                        &g,
                        &d,
                        gw.data_mut(),
                        gb.data_mut(),
                        want_input,
                    ) {
                        Some(gx) => gx,
                        None => break,
                    }
                }
                LayerSpec::Relu => {
                    for (gi, &xi) in g.iter_mut().zip(input.data()) {
                        if xi <= T::zero() {
                            *gi = T::zero();
                        }
                    }
                    g
                }
                LayerSpec::Flatten => g,
                LayerSpec::AvgPool2x2 => kernels::avgpool_backward(
                    &g,
                    batch * in_shape[1],
                    in_shape[2],
                    in_shape[3],
                ),
            };
        }
        Ok(grads)
    }
}

fn check_batch<T: Scalar>(spec: &NetworkSpec, batch: &Tensor<T>) -> Result<()> {
    let shape = batch.shape();
    if shape.len() != spec.input_shape.len() + 1 || shape[1..] != spec.input_shape[..] {
        let mut expected = vec![shape.first().copied().unwrap_or(0)];
        expected.extend_from_slice(&spec.input_shape);
        return Err(Error::shape("network input batch", &expected, shape));
    }
    Ok(())
}

/// Forward pass keeping every intermediate activation.
pub fn forward_trace<T: Scalar>(
    spec: &NetworkSpec,
    params: &Params<T>,
    batch: &Tensor<T>,
) -> Result<Trace<T>> {
    let shapes = spec.validate()?;
    params.check_matches(spec)?;
    check_batch(spec, batch)?;
    let n = batch.rows();
    let mut acts = Vec::with_capacity(spec.layers.len() + 1);
    acts.push(batch.clone());
    for (k, layer) in spec.layers.iter().enumerate() {
        let input = &acts[k];
        let in_shape = input.shape();
        let data = match *layer {
            LayerSpec::Dense { fan_in, fan_out } => {
                let p = params.layers[k].as_ref().expect("checked");
                kernels::dense_forward(
                    input.data(),
                    p.weight.data(),
                    p.bias.data(),
                    n,
                    fan_in,
                    fan_out,
                )
            }
            LayerSpec::Conv3x3 { fan_in, fan_out } => {
                let p = params.layers[k].as_ref().expect("checked");
                let d = ConvDims {
                    batch: n,
                    c_in: fan_in,
                    c_out: fan_out,
                    h: in_shape[2],
                    w: in_shape[3],
                };
                kernels::conv3x3_forward(input.data(), p.weight.data(), p.bias.data(), &d)
            }
            LayerSpec::Relu => input
                .data()
                .iter()
                .map(|&x| if x > T::zero() { x } else { T::zero() })
                .collect(),
            LayerSpec::Flatten => input.data().to_vec(),
            LayerSpec::AvgPool2x2 => {
                kernels::avgpool_forward(input.data(), n * in_shape[1], in_shape[2], in_shape[3])
            }
        };
        let mut shape = vec![n];
        shape.extend_from_slice(&shapes[k]);
        acts.push(Tensor::new(shape, data)?);
    }
    Ok(Trace {
        acts,
        feature_tap: spec.feature_tap,
    })
}

/// Logits `(batch, num_classes)` and the feature-tap activation.
pub fn forward<T: Scalar>(
    spec: &NetworkSpec,
    params: &Params<T>,
    batch: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok(forward_trace(spec, params, batch)?.into_outputs())
}

/// Gradient of `<logit_grad, logits(params)>` with respect to the parameters.
pub fn backward<T: Scalar>(
    spec: &NetworkSpec,
    params: &Params<T>,
    batch: &Tensor<T>,
    logit_grad: &Tensor<T>,
) -> Result<Params<T>> {
    forward_trace(spec, params, batch)?.backward(spec, params, logit_grad, None)
}

/// As [`backward`], with an extra gradient injected at the feature tap.
pub fn backward_with_features<T: Scalar>(
    spec: &NetworkSpec,
    params: &Params<T>,
    batch: &Tensor<T>,
    logit_grad: &Tensor<T>,
    feature_grad: &Tensor<T>,
) -> Result<Params<T>> {
    forward_trace(spec, params, batch)?.backward(spec, params, logit_grad, Some(feature_grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{init_params, LayerParams};

    fn single_dense(n: usize, m: usize) -> NetworkSpec {
        NetworkSpec {
            input_shape: vec![n],
            layers: vec![LayerSpec::Dense { fan_in: n, fan_out: m }],
            num_classes: m,
            feature_tap: 0,
        }
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let spec = single_dense(3, 3);
        let params = Params {
            layers: vec![Some(LayerParams {
                weight: Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0f32 } else { 0.0 }),
                bias: Tensor::zeros(&[3]),
            })],
        };
        let x = Tensor::new(vec![2, 3], vec![1.0f32, -2.0, 3.5, 0.25, 0.0, -7.0]).unwrap();
        let (logits, _) = forward(&spec, &params, &x).unwrap();
        assert_eq!(logits, x);
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let spec = NetworkSpec::mlp(&[5], &[4], 3);
        let params = Params::<f32>::zeros(&spec);
        let x = Tensor::from_fn(&[4, 5], |i| i as f32 - 7.0);
        let (logits, _) = forward(&spec, &params, &x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_reports_expected_and_actual() {
        let spec = NetworkSpec::mlp(&[5], &[4], 3);
        let params: Params<f32> = init_params(&spec, 0).unwrap();
        let x = Tensor::<f32>::zeros(&[2, 6]);
        let err = forward(&spec, &params, &x).unwrap_err().to_string();
        assert!(err.contains("[2, 5]") && err.contains("[2, 6]"), "{err}");
    }

    #[test]
    fn zero_logit_grad_gives_zero_gradients() {
        let spec = NetworkSpec::mlp(&[6], &[5, 4], 3);
        let params: Params<f32> = init_params(&spec, 2).unwrap();
        let x = Tensor::from_fn(&[3, 6], |i| (i as f32 * 0.37).sin());
        let g = backward(&spec, &params, &x, &Tensor::zeros(&[3, 3])).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_dense_weight_grad_is_outer_product() {
        let spec = single_dense(3, 2);
        let params: Params<f32> = init_params(&spec, 5).unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.5f32, -1.0, 2.0]).unwrap();
        let g = Tensor::new(vec![1, 2], vec![3.0f32, -0.5]).unwrap();
        let grads = backward(&spec, &params, &x, &g).unwrap();
        let gw = grads.layers[0].as_ref().unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(gw.weight.data()[o * 3 + i], g.data()[o] * x.data()[i]);
            }
            assert_eq!(gw.bias.data()[o], g.data()[o]);
        }
    }

    #[test]
    fn forward_is_bitwise_repeatable() {
        let spec = NetworkSpec::mlp(&[1, 6, 6], &[7], 4);
        let params: Params<f32> = init_params(&spec, 11).unwrap();
        let x = Tensor::from_fn(&[5, 1, 6, 6], |i| ((i * 13) % 17) as f32 / 17.0);
        let a = forward(&spec, &params, &x).unwrap();
        let b = forward(&spec, &params, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rows_are_independent_of_batch_composition() {
        let spec = NetworkSpec::mlp(&[9], &[8], 3);
        let params: Params<f32> = init_params(&spec, 4).unwrap();
        let x = Tensor::from_fn(&[4, 9], |i| ((i * 7) % 5) as f32 - 2.0);
        let (all, _) = forward(&spec, &params, &x).unwrap();
        let one = Tensor::new(vec![1, 9], x.row(2).to_vec()).unwrap();
        let (single, _) = forward(&spec, &params, &one).unwrap();
        assert_eq!(all.row(2), single.row(0));
    }
}
