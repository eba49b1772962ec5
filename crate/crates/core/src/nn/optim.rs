use serde::{Deserialize, Serialize};

use super::params::Params;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Step-decay learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    /// Epochs (0-based) from which the next decay applies.
    pub drop_epochs: Vec<u32>,
    pub drop_factor: f64,
    pub total_epochs: u32,
}

impl LrSchedule {
    pub fn constant(lr: f64, total_epochs: u32) -> Self {
        Self {
            initial_lr: lr,
            drop_epochs: Vec::new(),
            drop_factor: 0.1,
            total_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::invalid("initial_lr must be > 0"));
        }
        if !(self.drop_factor > 0.0 && self.drop_factor < 1.0) {
            return Err(Error::invalid("drop_factor must be in (0, 1)"));
        }
        if self.total_epochs < 1 {
            return Err(Error::invalid("total_epochs must be >= 1"));
        }
        if self.drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("drop_epochs must be strictly increasing"));
        }
        if self.drop_epochs.iter().any(|&e| e >= self.total_epochs) {
            return Err(Error::invalid("drop_epochs must be < total_epochs"));
        }
        Ok(())
    }

    /// `initial_lr * drop_factor^(number of drop epochs <= epoch)`.
    pub fn lr_at(&self, epoch: u32) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::invalid(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        let drops = self.drop_epochs.iter().filter(|&&e| e <= epoch).count();
        Ok((0..drops).fold(self.initial_lr, |lr, _| lr * self.drop_factor))
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be >= 0"));
        }
        self.schedule.validate()
    }
}

/// One in-place update:
/// `g' = g + wd * w`, `v = momentum * v + g'`, `w = w - lr * v`.
pub fn sgd_step<T: Scalar>(
    params: &mut Params<T>,
    velocity: &mut Params<T>,
    grads: &Params<T>,
    cfg: &SgdConfig,
    lr: f64,
) -> Result<()> {
    params.check_same_layout(grads, "sgd gradients")?;
    params.check_same_layout(velocity, "sgd velocity")?;
    if lr.is_nan() || lr < 0.0 {
        return Err(Error::invalid("learning rate must be >= 0"));
    }
    let lr = T::from_f64_lossy(lr);
    let mu = T::from_f64_lossy(cfg.momentum);
    let wd = T::from_f64_lossy(cfg.weight_decay);
    for ((w, v), g) in params
        .tensors_mut()
        .zip(velocity.tensors_mut())
        .zip(grads.tensors())
    {
        for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            let geff = gi + wd * *wi;
            *vi = mu * *vi + geff;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::init_params;
    use crate::nn::spec::NetworkSpec;

    fn step_schedule() -> LrSchedule {
        LrSchedule {
            initial_lr: 0.05,
            drop_epochs: vec![150, 180, 210],
            drop_factor: 0.1,
            total_epochs: 240,
        }
    }

    fn cfg(momentum: f64, weight_decay: f64) -> SgdConfig {
        SgdConfig {
            momentum,
            weight_decay,
            schedule: LrSchedule::constant(0.1, 1),
        }
    }

    #[test]
    fn lr_schedule_values() {
        let s = step_schedule();
        assert_eq!(s.lr_at(0).unwrap(), 0.05);
        assert!((s.lr_at(149).unwrap() - 0.05).abs() < 1e-15);
        assert!((s.lr_at(155).unwrap() - 0.005).abs() < 1e-15);
        assert!((s.lr_at(215).unwrap() - 5e-5).abs() < 1e-15);
        assert!(s.lr_at(240).is_err());
    }

    #[test]
    fn schedule_validation() {
        let mut s = step_schedule();
        s.drop_epochs = vec![180, 150];
        assert!(s.validate().is_err());
        let mut s = step_schedule();
        s.drop_epochs = vec![240];
        assert!(s.validate().is_err());
        let mut s = step_schedule();
        s.drop_factor = 1.0;
        assert!(s.validate().is_err());
        assert!(step_schedule().validate().is_ok());
    }

    fn setup() -> (Params<f32>, Params<f32>) {
        let spec = NetworkSpec::mlp(&[4], &[3], 2);
        let p: Params<f32> = init_params(&spec, 1).unwrap();
        let mut g = p.zeros_like();
        for (i, t) in g.tensors_mut().enumerate() {
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                *v = ((i * 31 + j * 7) % 13) as f32 * 0.1 - 0.6;
            }
        }
        (p, g)
    }

    #[test]
    fn plain_sgd_is_exact() {
        let (p, g) = setup();
        let mut w = p.clone();
        let mut v = p.zeros_like();
        sgd_step(&mut w, &mut v, &g, &cfg(0.0, 0.0), 0.05).unwrap();
        for ((a, b), c) in w.flatten().iter().zip(p.flatten()).zip(g.flatten()) {
            assert_eq!(*a, b - 0.05f32 * c);
        }
    }

    #[test]
    fn pure_weight_decay_shrinks() {
        let (p, g) = setup();
        let g = g.zeros_like();
        let mut w = p.clone();
        let mut v = p.zeros_like();
        sgd_step(&mut w, &mut v, &g, &cfg(0.0, 5e-4), 0.1).unwrap();
        for (a, b) in w.flatten().iter().zip(p.flatten()) {
            assert!((a - b * (1.0 - 0.1 * 5e-4)).abs() <= 1e-7 * b.abs().max(1.0));
        }
    }

    #[test]
    fn momentum_two_steps_match_unrolled_recurrence() {
        let (p, g) = setup();
        let (lr, mu, wd) = (0.1f64, 0.9f64, 1e-3f64);
        let mut w = p.clone();
        let mut v = p.zeros_like();
        let c = cfg(mu, wd);
        sgd_step(&mut w, &mut v, &g, &c, lr).unwrap();
        sgd_step(&mut w, &mut v, &g, &c, lr).unwrap();
        for ((got, w0), g0) in w.flatten().iter().zip(p.flatten()).zip(g.flatten()) {
            let (w0, g0) = (w0 as f64, g0 as f64);
            let v1 = g0 + wd * w0;
            let w1 = w0 - lr * v1;
            let v2 = mu * v1 + g0 + wd * w1;
            let w2 = w1 - lr * v2;
            assert!((*got as f64 - w2).abs() < 1e-6, "{got} vs {w2}");
        }
    }

    #[test]
    fn zero_lr_is_identity() {
        let (p, g) = setup();
        let mut w = p.clone();
        let mut v = p.zeros_like();
        sgd_step(&mut w, &mut v, &g, &cfg(0.9, 5e-4), 0.0).unwrap();
        assert_eq!(w, p);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (mut p, _) = setup();
        let other: Params<f32> = init_params(&NetworkSpec::mlp(&[4], &[5], 2), 0).unwrap();
        let mut v = p.zeros_like();
        assert!(sgd_step(&mut p, &mut v, &other, &cfg(0.0, 0.0), 0.1).is_err());
    }
}
