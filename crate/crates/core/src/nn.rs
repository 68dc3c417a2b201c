//! Parameterized building blocks shared by mixers, embeddings and the head.

use spach_tensor::{Conv2dSpec, Element, Graph, Parameter, Rng, Var};

use crate::error::Result;

pub(crate) const LN_EPS: f64 = 1e-6;
pub(crate) const LINEAR_INIT_STD: f64 = 0.02;

/// Ordered `(name, parameter)` list.
pub type NamedParams<T> = Vec<(String, Parameter<T>)>;

/// `y = x W + b` with `W` stored `[in, out]`.
#[derive(Debug)]
pub struct Linear<T> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
}

impl<T: Element> Linear<T> {
    pub fn new(inputs: usize, outputs: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        Ok(Linear {
            weight: Parameter::new(rng.trunc_normal_tensor([inputs, outputs], LINEAR_INIT_STD)?),
            bias: if bias {
                Some(Parameter::new(spach_tensor::Tensor::zeros([outputs])?))
            } else {
                None
            },
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `x` is `[rows, in]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        Ok(g.linear(x, w, b)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

/// Layer normalization with affine parameters.
#[derive(Debug)]
pub struct LayerNorm<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
}

impl<T: Element> LayerNorm<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: Parameter::new(spach_tensor::Tensor::ones([channels])?),
            beta: Parameter::new(spach_tensor::Tensor::zeros([channels])?),
        })
    }

    /// Normalizes the last axis.
    pub fn forward_last(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        Ok(g.layernorm(x, gamma, beta, T::from_f64_lossy(LN_EPS))?)
    }

    /// Normalizes the channel axis of an `[N,C,H,W]` map.
    pub fn forward_channels(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let nhwc = g.permute(x, &[0, 2, 3, 1])?;
        let y = self.forward_last(g, nhwc)?;
        Ok(g.permute(y, &[0, 3, 1, 2])?)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Square-kernel 2-D convolution layer.
#[derive(Debug)]
pub struct Conv2d<T> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub spec: Conv2dSpec,
}

impl<T: Element> Conv2d<T> {
    /// Kernel drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); bias zero.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = in_channels / spec.groups * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Conv2d {
            weight: Parameter::new(rng.uniform_tensor(
                [out_channels, in_channels / spec.groups, kernel, kernel],
                -bound,
                bound,
            )?),
            bias: if bias {
                Some(Parameter::new(spach_tensor::Tensor::zeros([out_channels])?))
            } else {
                None
            },
            spec,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        Ok(g.conv2d(x, w, b, self.spec)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

/// Per-call forward state: train/eval mode and the stochastic-depth stream.
#[derive(Debug)]
pub struct Ctx {
    training: bool,
    rng: Option<Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx {
            training: false,
            rng: None,
        }
    }

    pub fn train(rng: Rng) -> Self {
        Ctx {
            training: true,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Per-sample residual-branch scales for drop path, `None` when inactive.
    pub(crate) fn drop_path_scales<T: Element>(
        &mut self,
        batch: usize,
        rate: f64,
    ) -> Option<Vec<T>> {
        if !self.training || rate <= 0.0 {
            return None;
        }
        let rng = self.rng.as_mut()?;
        let keep = 1.0 - rate;
        Some(
            (0..batch)
                .map(|_| {
                    if rng.bernoulli(keep) {
                        T::from_f64_lossy(1.0 / keep)
                    } else {
                        T::zero()
                    }
                })
                .collect(),
        )
    }
}
