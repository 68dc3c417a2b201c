use spach_tensor::{Element, Parameter};

use crate::error::{Result, SpachError};
use crate::nn::NamedParams;

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// Which parameters receive weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayPolicy {
    All,
    /// Only tensors of rank >= 2 (weights); biases and norm affines are exempt.
    MatricesOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub decay_policy: DecayPolicy,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            weight_decay: 0.05,
            betas: ADAM_BETAS,
            eps: ADAM_EPS,
            decay_policy: DecayPolicy::MatricesOnly,
        }
    }
}

struct Slot<T> {
    name: String,
    param: Parameter<T>,
    m: Vec<f64>,
    v: Vec<f64>,
    decay: bool,
}

/// Adam with decoupled weight decay and bias-corrected moments.
pub struct AdamW<T> {
    config: AdamWConfig,
    slots: Vec<Slot<T>>,
    step: u64,
}

impl<T: Element> AdamW<T> {
    /// `params` must not contain the same storage twice.
    pub fn new(params: NamedParams<T>, config: AdamWConfig) -> Self {
        let slots = params
            .into_iter()
            .map(|(name, param)| {
                let n = param.numel();
                let decay = match config.decay_policy {
                    DecayPolicy::All => true,
                    DecayPolicy::MatricesOnly => param.shape().len() >= 2,
                };
                Slot {
                    name,
                    param,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    decay,
                }
            })
            .collect();
        AdamW {
            config,
            slots,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` using the accumulated gradients.
    ///
    /// Gradients are checked for finiteness before any parameter changes.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, lr: f64) -> Result<()> {
        let grads: Vec<Option<Vec<f64>>> = self
            .slots
            .iter()
            .map(|s| {
                s.param
                    .grad()
                    .map(|g| g.data().iter().map(|v| v.as_f64()).collect())
            })
            .collect();
        for (slot, g) in self.slots.iter().zip(&grads) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(SpachError::NonFinite(format!(
                        "gradient of '{}'",
                        slot.name
                    )));
                }
            }
        }
        self.step += 1;
        let (b1, b2) = self.config.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let eps = self.config.eps;
        let wd = self.config.weight_decay;
        for (slot, g) in self.slots.iter_mut().zip(grads) {
            let decay = if slot.decay { lr * wd } else { 0.0 };
            let (m, v) = (&mut slot.m, &mut slot.v);
            slot.param.update(|t| {
                for (i, p) in t.data_mut().iter_mut().enumerate() {
                    let gi = g.as_ref().map_or(0.0, |g| g[i]);
                    let mut x = p.as_f64();
                    x -= decay * x;
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    x -= lr * mhat / (vhat.sqrt() + eps);
                    *p = T::from_f64_lossy(x);
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use spach_tensor::Tensor;

    fn scalar_param(v: f64) -> Parameter<f64> {
        Parameter::new(Tensor::from_vec([1, 1], vec![v]).unwrap())
    }

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            weight_decay: wd,
            decay_policy: DecayPolicy::All,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let p = scalar_param(1.25);
        p.accumulate_grad(&Tensor::zeros([1, 1]).unwrap()).unwrap();
        let mut opt = AdamW::new(vec![("p".into(), p.clone())], cfg(0.0));
        opt.step(0.1).unwrap();
        assert_eq!(p.value().data()[0], 1.25);
    }

    #[test]
    fn decoupled_decay_shrinks_exactly() {
        let p = scalar_param(2.0);
        let mut opt = AdamW::new(vec![("p".into(), p.clone())], cfg(0.05));
        opt.step(0.01).unwrap();
        assert_eq!(p.value().data()[0], 2.0 - 0.01 * 0.05 * 2.0);
    }

    #[test]
    fn single_step_matches_hand_formula() {
        let (p0, g, lr, wd) = (0.7_f64, -0.3_f64, 0.002, 0.05);
        let p = scalar_param(p0);
        p.accumulate_grad(&Tensor::from_vec([1, 1], vec![g]).unwrap())
            .unwrap();
        let mut opt = AdamW::new(vec![("p".into(), p.clone())], cfg(wd));
        opt.step(lr).unwrap();
        let decayed = p0 - lr * wd * p0;
        let m = (1.0 - 0.9) * g / (1.0 - 0.9);
        let v = (1.0 - 0.999) * g * g / (1.0 - 0.999);
        let expected = decayed - lr * m / (v.sqrt() + 1e-8);
        assert!((p.value().data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn matrices_only_policy_skips_vectors() {
        let w = scalar_param(1.0);
        let b = Parameter::new(Tensor::from_vec([1], vec![1.0]).unwrap());
        let mut opt = AdamW::new(
            vec![("w".into(), w.clone()), ("b".into(), b.clone())],
            AdamWConfig::default(),
        );
        opt.step(0.1).unwrap();
        assert!(w.value().data()[0] < 1.0);
        assert_eq!(b.value().data()[0], 1.0);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let p = scalar_param(1.0);
        p.accumulate_grad(&Tensor::from_vec([1, 1], vec![f64::NAN]).unwrap())
            .unwrap();
        let mut opt = AdamW::new(vec![("p".into(), p.clone())], cfg(0.05));
        assert!(matches!(opt.step(0.1), Err(SpachError::NonFinite(_))));
        assert_eq!(p.value().data()[0], 1.0);
    }
}
