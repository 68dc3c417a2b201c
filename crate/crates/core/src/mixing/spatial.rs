use spach_tensor::{Conv2dSpec, Element, Graph, Rng, Tensor, Var};

use super::{MixingBlockSpec, SpatialKind};
use crate::error::{Result, SpachError};
use crate::nn::{Conv2d, LayerNorm, Linear, NamedParams};

/// `z + dwconv3x3(z)` with padding 1 and no bias.
pub fn cpe<T: Element>(g: &mut Graph<T>, z: Var, weight: Var) -> Result<Var> {
    let channels = g.shape(z)[1];
    let spec = Conv2dSpec::new(1, 1, channels);
    let local = g.conv2d(z, weight, None, spec)?;
    Ok(g.add(z, local)?)
}

fn depthwise3x3<T: Element>(channels: usize, rng: &mut Rng) -> Result<Conv2d<T>> {
    Conv2d::new(
        channels,
        channels,
        3,
        Conv2dSpec::new(1, 1, channels),
        false,
        rng,
    )
}

#[derive(Debug)]
pub enum SpatialBody<T> {
    /// Depth-wise 3x3 convolution.
    Conv { dw: Conv2d<T> },
    /// Multi-head self-attention over all positions.
    Attention {
        q: Linear<T>,
        k: Linear<T>,
        v: Linear<T>,
        o: Linear<T>,
        heads: usize,
    },
    /// Two-layer MLP along the token axis, shared across channels.
    Mlp { fc1: Linear<T>, fc2: Linear<T> },
}

/// Residual spatial mixing `x + S(norm(x))`.
#[derive(Debug)]
pub struct SpatialMixer<T> {
    kind: SpatialKind,
    channels: usize,
    tokens: usize,
    pub norm: LayerNorm<T>,
    pub cpe: Option<Conv2d<T>>,
    pub body: SpatialBody<T>,
}

impl<T: Element> SpatialMixer<T> {
    pub fn new(spec: &MixingBlockSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let c = spec.channels;
        let cpe = if spec.use_cpe {
            Some(depthwise3x3(c, rng)?)
        } else {
            None
        };
        let body = match spec.spatial_kind {
            SpatialKind::Conv => SpatialBody::Conv {
                dw: depthwise3x3(c, rng)?,
            },
            SpatialKind::Attention => SpatialBody::Attention {
                q: Linear::new(c, c, false, rng)?,
                k: Linear::new(c, c, false, rng)?,
                v: Linear::new(c, c, false, rng)?,
                o: Linear::new(c, c, true, rng)?,
                heads: spec.heads().0,
            },
            SpatialKind::Mlp => {
                let hidden = spec.token_hidden();
                SpatialBody::Mlp {
                    fc1: Linear::new(spec.tokens, hidden, true, rng)?,
                    fc2: Linear::new(hidden, spec.tokens, true, rng)?,
                }
            }
        };
        Ok(SpatialMixer {
            kind: spec.spatial_kind,
            channels: c,
            tokens: spec.tokens,
            norm: LayerNorm::new(c)?,
            cpe,
            body,
        })
    }

    pub fn kind(&self) -> SpatialKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn has_cpe(&self) -> bool {
        self.cpe.is_some()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(SpachError::Tensor(spach_tensor::TensorError::Dimension(
                format!(
                    "spatial mixer over {} channels got input {shape:?}",
                    self.channels
                ),
            )));
        }
        if self.kind == SpatialKind::Mlp && shape[2] * shape[3] != self.tokens {
            return Err(SpachError::Resolution(format!(
                "token MLP built for {} positions, input has {}x{}",
                self.tokens, shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// Normalized (and position-encoded) input to the body.
    fn prepare(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let u = self.norm.forward_channels(g, x)?;
        match &self.cpe {
            Some(conv) => {
                let w = g.param(&conv.weight);
                cpe(g, u, w)
            }
            None => Ok(u),
        }
    }

    /// Attention probabilities `[N*heads, T, T]` and the value tokens.
    fn attention_probs(
        &self,
        g: &mut Graph<T>,
        u: Var,
        q: &Linear<T>,
        k: &Linear<T>,
        heads: usize,
    ) -> Result<(Var, Var)> {
        let [n, c, h, w] = dims4(g.shape(u));
        let t = h * w;
        let d = c / heads;
        let tokens = g.permute(u, &[0, 2, 3, 1])?;
        let tokens = g.reshape(tokens, &[n * t, c])?;
        let split = |g: &mut Graph<T>, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[n, t, heads, d])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            Ok(g.reshape(v, &[n * heads, t, d])?)
        };
        let qv = q.forward(g, tokens)?;
        let qv = split(g, qv)?;
        let kv = k.forward(g, tokens)?;
        let kv = split(g, kv)?;
        let kt = g.transpose(kv, 1, 2)?;
        let scores = g.bmm(qv, kt)?;
        let scores = g.scale(scores, T::from_f64_lossy(1.0 / (d as f64).sqrt()));
        Ok((g.softmax(scores, 2)?, tokens))
    }

    /// `S(norm(x))` without the residual.
    pub fn branch(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let u = self.prepare(g, x)?;
        let [n, c, h, w] = dims4(g.shape(u));
        match &self.body {
            SpatialBody::Conv { dw } => dw.forward(g, u),
            SpatialBody::Attention { q, k, v, o, heads } => {
                let heads = *heads;
                let (t, d) = (h * w, c / heads);
                let (probs, tokens) = self.attention_probs(g, u, q, k, heads)?;
                let vv = v.forward(g, tokens)?;
                let vv = g.reshape(vv, &[n, t, heads, d])?;
                let vv = g.permute(vv, &[0, 2, 1, 3])?;
                let vv = g.reshape(vv, &[n * heads, t, d])?;
                let mixed = g.bmm(probs, vv)?;
                let mixed = g.reshape(mixed, &[n, heads, t, d])?;
                let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
                let mixed = g.reshape(mixed, &[n * t, c])?;
                let out = o.forward(g, mixed)?;
                let out = g.reshape(out, &[n, h, w, c])?;
                Ok(g.permute(out, &[0, 3, 1, 2])?)
            }
            SpatialBody::Mlp { fc1, fc2 } => {
                let rows = g.reshape(u, &[n * c, h * w])?;
                let hidden = fc1.forward(g, rows)?;
                let hidden = g.gelu(hidden);
                let out = fc2.forward(g, hidden)?;
                Ok(g.reshape(out, &[n, c, h, w])?)
            }
        }
    }

    /// `x + S(norm(x))`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let b = self.branch(g, x)?;
        Ok(g.add(x, b)?)
    }

    /// Attention maps `[N, heads, T, T]` for input `x`; rows sum to one.
    ///
    /// Returns `None` for non-attention mixers.
    pub fn attention_maps(&self, x: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        let SpatialBody::Attention { q, k, heads, .. } = &self.body else {
            return Ok(None);
        };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let u = self.prepare(&mut g, xv)?;
        let (probs, _) = self.attention_probs(&mut g, u, q, k, *heads)?;
        let [n, _, h, w] = dims4(x.shape());
        let t = h * w;
        Ok(Some(g.value(probs).clone().reshape([n, *heads, t, t])?))
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.norm.collect(&format!("{prefix}.norm"), out);
        if let Some(c) = &self.cpe {
            c.collect(&format!("{prefix}.cpe"), out);
        }
        match &self.body {
            SpatialBody::Conv { dw } => dw.collect(&format!("{prefix}.dw"), out),
            SpatialBody::Attention { q, k, v, o, .. } => {
                q.collect(&format!("{prefix}.q"), out);
                k.collect(&format!("{prefix}.k"), out);
                v.collect(&format!("{prefix}.v"), out);
                o.collect(&format!("{prefix}.o"), out);
            }
            SpatialBody::Mlp { fc1, fc2 } => {
                fc1.collect(&format!("{prefix}.fc1"), out);
                fc2.collect(&format!("{prefix}.fc2"), out);
            }
        }
    }
}

pub(crate) fn dims4(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}
