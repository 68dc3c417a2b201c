//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during one forward pass in execution
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse.

use std::sync::Arc;

use crate::element::Element;
use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{self, Conv2dSpec};
use crate::param::Parameter;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    MatMul(Var, Var),
    Bmm(Var, Var),
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Gelu(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    MeanAxes {
        x: Var,
        axes: Vec<usize>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: Tensor<T>,
        probs: Tensor<T>,
    },
    ScaleSamples {
        x: Var,
        scales: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<Parameter<T>>,
}

/// Target of a cross-entropy loss.
#[derive(Clone, Debug)]
pub enum Target<T> {
    Classes(Vec<usize>),
    /// Row-stochastic `[B,K]` matrix, e.g. mixup or smoothed labels.
    Probabilities(Tensor<T>),
}

/// One forward pass worth of recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad, None)
    }

    fn push_arc(
        &mut self,
        value: Arc<Tensor<T>>,
        op: Op<T>,
        requires_grad: bool,
        param: Option<Parameter<T>>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is kept after [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Binds a parameter; its gradient is accumulated into the parameter on backward.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        let (value, rg) = {
            let slot = p.read();
            (Arc::clone(&slot.value), slot.requires_grad)
        };
        self.push_arc(value, Op::Leaf, rg, Some(p.clone()))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::sub(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::mul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let y = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(y, Op::Scale(a, c), rg)
    }

    /// `x + bias` with `bias` broadcast along `axis`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let y = kernels::add_bias(self.value(x), self.value(bias), axis)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(y, Op::AddBias { x, bias, axis }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::MatMul(a, b), rg))
    }

    /// `x W + b` over the last axis of a rank-2 `x`, with `W` stored `[in, out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_bias(y, b, 1),
            None => Ok(y),
        }
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::bmm(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Bmm(a, b), rg))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    ) -> Result<Var> {
        let y = kernels::conv2d(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                weight,
                bias,
                spec,
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (y, mean, rstd) =
            kernels::layernorm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = kernels::softmax(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Softmax { x, axis }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = kernels::gelu(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::Gelu(x), rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let y = kernels::permute(self.value(x), perm)?;
        let rg = self.rg(x);
        Ok(self.push(
            y,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a0: usize, a1: usize) -> Result<Var> {
        let rank = self.value(x).rank();
        if a0 >= rank || a1 >= rank {
            return Err(dim_err!("transpose axes ({a0},{a1}) for rank {rank}"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a0, a1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = Tensor::clone(self.value(x)).reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let y = kernels::mean_axes(self.value(x), axes)?;
        let rg = self.rg(x);
        Ok(self.push(
            y,
            Op::MeanAxes {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(y, Op::Sum(x), rg)
    }

    /// Mean cross entropy of `[B,K]` logits; the result is a scalar.
    pub fn cross_entropy(&mut self, logits: Var, target: Target<T>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(dim_err!(
                "cross_entropy expects [B,K] logits, got {shape:?}"
            ));
        }
        let target = match target {
            Target::Classes(labels) => {
                if labels.len() != shape[0] {
                    return Err(dim_err!(
                        "{} labels for a batch of {}",
                        labels.len(),
                        shape[0]
                    ));
                }
                kernels::one_hot(&labels, shape[1])?
            }
            Target::Probabilities(p) => p,
        };
        let (loss, probs) = kernels::cross_entropy(self.value(logits), &target)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    /// Multiplies each sample along the leading axis by a fixed factor.
    pub fn scale_samples(&mut self, x: Var, scales: Vec<T>) -> Result<Var> {
        let y = kernels::scale_samples(self.value(x), &scales)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::ScaleSamples { x, scales }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Afterwards every leaf that requires a gradient has one (zeros if the
    /// loss does not depend on it), and parameter leaves have accumulated
    /// theirs into the parameter.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one())?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if grads[i].is_none() {
                grads[i] = Some(node.value.zeros_like());
            }
            if let (Some(p), Some(g)) = (&node.param, &grads[i]) {
                p.accumulate_grad(g)?;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let mut acc = |v: Var, d: Tensor<T>| -> Result<()> {
            if !nodes[v.0].requires_grad {
                return Ok(());
            }
            match grads[v.0].as_mut() {
                Some(existing) => existing.add_assign(&d)?,
                None => grads[v.0] = Some(d),
            }
            Ok(())
        };
        let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                if nodes[a.0].requires_grad {
                    acc(*a, kernels::mul(g, val(*b))?)?;
                }
                if nodes[b.0].requires_grad {
                    acc(*b, kernels::mul(g, val(*a))?)?;
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(*a, g.map(|v| v * c))?;
            }
            Op::AddBias { x, bias, axis } => {
                acc(*x, g.clone())?;
                if nodes[bias.0].requires_grad {
                    acc(*bias, kernels::add_bias_backward(g, *axis)?)?;
                }
            }
            Op::MatMul(a, b) => {
                let (da, db) = kernels::matmul_backward(val(*a), val(*b), g)?;
                acc(*a, da)?;
                acc(*b, db)?;
            }
            Op::Bmm(a, b) => {
                let (da, db) = kernels::bmm_backward(val(*a), val(*b), g)?;
                acc(*a, da)?;
                acc(*b, db)?;
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                spec,
            } => {
                let need_dx = nodes[x.0].requires_grad;
                let (dx, dw, db) =
                    kernels::conv2d_backward(val(*x), val(*weight), g, *spec, need_dx)?;
                if let Some(dx) = dx {
                    acc(*x, dx)?;
                }
                acc(*weight, dw)?;
                if let Some(b) = bias {
                    acc(*b, db)?;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (dx, dg, db) =
                    kernels::layernorm_backward(val(*x), val(*gamma), mean, rstd, g)?;
                acc(*x, dx)?;
                acc(*gamma, dg)?;
                acc(*beta, db)?;
            }
            Op::Softmax { x, axis } => {
                acc(*x, kernels::softmax_backward(&nodes[i].value, g, *axis)?)?;
            }
            Op::Gelu(x) => {
                acc(*x, kernels::gelu_backward(val(*x), g)?)?;
            }
            Op::Permute { x, perm } => {
                acc(
                    *x,
                    kernels::permute(g, &kernels::inverse_permutation(perm))?,
                )?;
            }
            Op::Reshape(x) => {
                acc(*x, g.clone().reshape(val(*x).shape().to_vec())?)?;
            }
            Op::MeanAxes { x, axes } => {
                acc(*x, kernels::mean_axes_backward(val(*x).shape(), axes, g)?)?;
            }
            Op::Sum(x) => {
                let s = g.item()?;
                acc(*x, Tensor::full(val(*x).shape().to_vec(), s)?)?;
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                acc(
                    *logits,
                    kernels::cross_entropy_backward(probs, target, g.item()?)?,
                )?;
            }
            Op::ScaleSamples { x, scales } => {
                acc(*x, kernels::scale_samples(g, scales)?)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn([2, 3], |i| i as f64).unwrap(), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gives_twice_x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec([2], vec![1.0, 2.0]).unwrap(), true);
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([2]).unwrap(), true);
        assert!(matches!(g.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones([2]).unwrap(), true);
        let y = g.leaf(Tensor::ones([3]).unwrap(), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(y).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn shared_parameter_grads_sum() {
        let p = Parameter::new(Tensor::from_vec([2], vec![1.0f64, 3.0]).unwrap());
        let mut g = Graph::new();
        let a = g.param(&p);
        let b = g.param(&p);
        let s = g.add(a, b).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(p.grad().unwrap().data(), &[2.0, 2.0]);
    }
}
