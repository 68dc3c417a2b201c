use std::sync::Arc;

use spach_tensor::{Element, Graph, Rng, Var};

use super::{ChannelMixer, MixingBlockSpec, SpatialMixer};
use crate::error::Result;
use crate::nn::{Ctx, NamedParams};

/// Spatial mixing followed by channel mixing, both residual and pre-normalized.
///
/// The spatial mixer sits behind an `Arc` so several blocks can share it.
#[derive(Debug)]
pub struct MixingBlock<T> {
    pub spatial: Arc<SpatialMixer<T>>,
    pub channel: ChannelMixer<T>,
    pub drop_path_rate: f64,
}

impl<T: Element> MixingBlock<T> {
    pub fn new(spec: &MixingBlockSpec, rng: &mut Rng) -> Result<Self> {
        let spatial = Arc::new(SpatialMixer::new(spec, rng)?);
        Self::with_spatial(spec, spatial, rng)
    }

    /// Builds a block around an existing (possibly shared) spatial mixer.
    pub fn with_spatial(
        spec: &MixingBlockSpec,
        spatial: Arc<SpatialMixer<T>>,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(MixingBlock {
            spatial,
            channel: ChannelMixer::new(spec, rng)?,
            drop_path_rate: spec.drop_path_rate,
        })
    }

    fn residual(&self, g: &mut Graph<T>, x: Var, branch: Var, ctx: &mut Ctx) -> Result<Var> {
        let batch = g.shape(x)[0];
        let branch = match ctx.drop_path_scales(batch, self.drop_path_rate) {
            Some(scales) => g.scale_samples(branch, scales)?,
            None => branch,
        };
        Ok(g.add(x, branch)?)
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let s = self.spatial.branch(g, x)?;
        let x = self.residual(g, x, s, ctx)?;
        let c = self.channel.branch(g, x)?;
        self.residual(g, x, c, ctx)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.spatial.collect(&format!("{prefix}.spatial"), out);
        self.channel.collect(&format!("{prefix}.channel"), out);
    }
}
