use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Weights and biases of every layer, in layer order. Parameter-free layers
/// hold `None`. Gradients and momentum buffers use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub layers: Vec<Option<LayerParams<T>>>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                l.param_shapes().map(|(w, b)| LayerParams {
                    weight: Tensor::zeros(&w),
                    bias: Tensor::zeros(&b),
                })
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerParams {
                        weight: Tensor::zeros(p.weight.shape()),
                        bias: Tensor::zeros(p.bias.shape()),
                    })
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// All tensors in canonical order: per layer, weight then bias.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| [&p.weight, &p.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
    }

    /// Concatenate every parameter into one vector (canonical order).
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn get_flat(&self, mut index: usize) -> Option<T> {
        for t in self.tensors() {
            if index < t.len() {
                return Some(t.data()[index]);
            }
            index -= t.len();
        }
        None
    }

    pub fn set_flat(&mut self, mut index: usize, value: T) -> bool {
        for t in self.tensors_mut() {
            if index < t.len() {
                t.data_mut()[index] = value;
                return true;
            }
            index -= t.len();
        }
        false
    }

    /// Verify that the layout matches `spec` exactly.
    pub fn check_matches(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::shape(
                "params layer count",
                &[spec.layers.len()],
                &[self.layers.len()],
            ));
        }
        for (i, (p, l)) in self.layers.iter().zip(&spec.layers).enumerate() {
            match (p, l.param_shapes()) {
                (None, None) => {}
                (Some(p), Some((w, b))) => {
                    p.weight.ensure_shape(&format!("layer {i} weight"), &w)?;
                    p.bias.ensure_shape(&format!("layer {i} bias"), &b)?;
                }
                (Some(_), None) => {
                    return Err(Error::invalid(format!(
                        "layer {i} has no parameters but params were given"
                    )))
                }
                (None, Some(_)) => {
                    return Err(Error::invalid(format!("layer {i} is missing parameters")))
                }
            }
        }
        Ok(())
    }

    /// Same-layout check between two parameter sets.
    pub fn check_same_layout(&self, other: &Self, context: &str) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(context, &[self.layers.len()], &[other.layers.len()]));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            match (a, b) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    b.weight.ensure_shape(context, a.weight.shape())?;
                    b.bias.ensure_shape(context, a.bias.shape())?;
                }
                _ => return Err(Error::invalid(format!("{context}: layer layout differs"))),
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerParams {
                        weight: p.weight.cast(),
                        bias: p.bias.cast(),
                    })
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }
}

/// He-uniform initialization: weights ~ U(-b, b) with `b = sqrt(6 / fan_in)`
/// (variance `2 / fan_in`), biases zero. Draws come from the `INIT` stream
/// of `seed`, layer by layer in row-major order.
pub fn init_params<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<Params<T>> {
    spec.validate()?;
    let mut rng = rng_from_seed(derive_seed(seed, stream::INIT));
    let mut params = Params::zeros(spec);
    for (layer, p) in spec.layers.iter().zip(params.layers.iter_mut()) {
        if let Some(p) = p {
            let bound = init_bound(layer.receptive_fan_in());
            for w in p.weight.data_mut() {
                *w = T::from_f64_lossy(rng.random_range(-bound..bound));
            }
        }
    }
    Ok(params)
}

pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::LayerSpec;

    fn dense(fan_in: usize, fan_out: usize) -> NetworkSpec {
        NetworkSpec {
            input_shape: vec![fan_in],
            layers: vec![LayerSpec::Dense { fan_in, fan_out }],
            num_classes: fan_out,
            feature_tap: 0,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let spec = dense(4, 2);
        let a: Params<f32> = init_params(&spec, 7).unwrap();
        let b: Params<f32> = init_params(&spec, 7).unwrap();
        let bits = |p: &Params<f32>| p.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c: Params<f32> = init_params(&spec, 8).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn biases_are_zero() {
        let spec = NetworkSpec::mlp(&[3, 4, 4], &[16, 8], 5);
        for seed in 0..5 {
            let p: Params<f32> = init_params(&spec, seed).unwrap();
            for l in p.layers.iter().flatten() {
                assert!(l.bias.data().iter().all(|&b| b == 0.0));
            }
        }
    }

    #[test]
    fn weight_variance_matches_fan_in_target() {
        // U(-b, b) has variance b^2 / 3 = 2 / fan_in.
        let target = init_bound(784).powi(2) / 3.0;
        assert!((target - 2.0 / 784.0).abs() < 1e-12);
        let p: Params<f32> = init_params(&dense(784, 10), 1).unwrap();
        let w = p.layers[0].as_ref().unwrap().weight.data();
        let n = w.len() as f64;
        let mean = w.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = w.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var / target - 1.0).abs() < 0.2, "var {var} target {target}");
    }

    #[test]
    fn param_count_matches_spec_formula() {
        let spec = NetworkSpec::mlp(&[1, 28, 28], &[32], 10);
        let p: Params<f32> = init_params(&spec, 0).unwrap();
        assert_eq!(p.num_params(), spec.param_count());
        p.check_matches(&spec).unwrap();
    }

    #[test]
    fn init_rejects_invalid_spec() {
        let mut spec = dense(4, 2);
        spec.layers.push(LayerSpec::Dense { fan_in: 3, fan_out: 2 });
        assert!(init_params::<f32>(&spec, 0).is_err());
    }

    #[test]
    fn flat_access_round_trips() {
        let spec = NetworkSpec::mlp(&[3], &[2], 2);
        let mut p: Params<f32> = init_params(&spec, 3).unwrap();
        let n = p.num_params();
        assert!(p.set_flat(n - 1, 9.0));
        assert_eq!(p.get_flat(n - 1), Some(9.0));
        assert_eq!(p.flatten()[n - 1], 9.0);
        assert!(p.get_flat(n).is_none());
    }
}
