use spach_tensor::{Element, Graph, Rng, Var};

use super::spatial::dims4;
use super::MixingBlockSpec;
use crate::error::Result;
use crate::nn::{LayerNorm, Linear, NamedParams};

/// Residual per-position MLP over channels, `x + W2 gelu(W1 norm(x) + b1) + b2`.
#[derive(Debug)]
pub struct ChannelMixer<T> {
    pub norm: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Element> ChannelMixer<T> {
    pub fn new(spec: &MixingBlockSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let (c, hidden) = (spec.channels, spec.channel_hidden());
        Ok(ChannelMixer {
            norm: LayerNorm::new(c)?,
            fc1: Linear::new(c, hidden, true, rng)?,
            fc2: Linear::new(hidden, c, true, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.fc1.in_features()
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_features()
    }

    /// Branch output without the residual.
    pub fn branch(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(g.shape(x));
        let tokens = g.permute(x, &[0, 2, 3, 1])?;
        let tokens = g.reshape(tokens, &[n * h * w, c])?;
        let u = self.norm.forward_last(g, tokens)?;
        let hidden = self.fc1.forward(g, u)?;
        let hidden = g.gelu(hidden);
        let out = self.fc2.forward(g, hidden)?;
        let out = g.reshape(out, &[n, h, w, c])?;
        Ok(g.permute(out, &[0, 3, 1, 2])?)
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let b = self.branch(g, x)?;
        Ok(g.add(x, b)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.norm.collect(&format!("{prefix}.norm"), out);
        self.fc1.collect(&format!("{prefix}.fc1"), out);
        self.fc2.collect(&format!("{prefix}.fc2"), out);
    }
}
