use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use spach_tensor::{checkpoint, AnyTensor, Conv2dSpec, Element, Graph, Rng, Tensor, Var};

use super::config::{Framework, ModelConfig, PatchEmbedKind};
use crate::error::{Result, SpachError};
use crate::mixing::{MixingBlock, MixingBlockSpec, SpatialKind, SpatialMixer};
use crate::nn::{Conv2d, Ctx, LayerNorm, Linear, NamedParams};

/// Hidden width of the deep patch embedding.
pub const DEEP_EMBED_WIDTH: usize = 64;

#[derive(Debug)]
pub enum PatchEmbed<T> {
    /// One `p x p` stride-`p` convolution.
    Default { conv: Conv2d<T>, patch: usize },
    /// conv7/s2 -> conv3 -> conv3 -> conv2/s2, with norm + gelu between.
    Deep {
        convs: [Conv2d<T>; 4],
        norms: [LayerNorm<T>; 3],
    },
}

impl<T: Element> PatchEmbed<T> {
    pub fn default_embed(patch: usize, channels: usize, rng: &mut Rng) -> Result<Self> {
        Ok(PatchEmbed::Default {
            conv: Conv2d::new(3, channels, patch, Conv2dSpec::new(patch, 0, 1), true, rng)?,
            patch,
        })
    }

    pub fn deep(channels: usize, rng: &mut Rng) -> Result<Self> {
        let w = DEEP_EMBED_WIDTH;
        Ok(PatchEmbed::Deep {
            convs: [
                Conv2d::new(3, w, 7, Conv2dSpec::new(2, 3, 1), true, rng)?,
                Conv2d::new(w, w, 3, Conv2dSpec::new(1, 1, 1), true, rng)?,
                Conv2d::new(w, w, 3, Conv2dSpec::new(1, 1, 1), true, rng)?,
                Conv2d::new(w, channels, 2, Conv2dSpec::new(2, 0, 1), true, rng)?,
            ],
            norms: [LayerNorm::new(w)?, LayerNorm::new(w)?, LayerNorm::new(w)?],
        })
    }

    pub fn stride(&self) -> usize {
        match self {
            PatchEmbed::Default { patch, .. } => *patch,
            PatchEmbed::Deep { .. } => 4,
        }
    }

    /// The convolutions in application order.
    pub fn convs(&self) -> Vec<&Conv2d<T>> {
        match self {
            PatchEmbed::Default { conv, .. } => vec![conv],
            PatchEmbed::Deep { convs, .. } => convs.iter().collect(),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let stride = self.stride();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(SpachError::Resolution(format!(
                "expected a [N,3,H,W] image batch, got {shape:?}"
            )));
        }
        if !shape[2].is_multiple_of(stride) || !shape[3].is_multiple_of(stride) {
            return Err(SpachError::Resolution(format!(
                "{}x{} not divisible by patch stride {stride}",
                shape[2], shape[3]
            )));
        }
        match self {
            PatchEmbed::Default { conv, .. } => conv.forward(g, x),
            PatchEmbed::Deep { convs, norms } => {
                let mut h = x;
                for (conv, norm) in convs.iter().zip(norms) {
                    h = conv.forward(g, h)?;
                    h = norm.forward_channels(g, h)?;
                    h = g.gelu(h);
                }
                convs[3].forward(g, h)
            }
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        match self {
            PatchEmbed::Default { conv, .. } => conv.collect(&format!("{prefix}.conv"), out),
            PatchEmbed::Deep { convs, norms } => {
                for (i, c) in convs.iter().enumerate() {
                    c.collect(&format!("{prefix}.conv{i}"), out);
                }
                for (i, n) in norms.iter().enumerate() {
                    n.collect(&format!("{prefix}.norm{i}"), out);
                }
            }
        }
    }
}

/// 2x2 stride-2 convolution doubling the width, followed by channel norm.
#[derive(Debug)]
pub struct Downsample<T> {
    pub conv: Conv2d<T>,
    pub norm: LayerNorm<T>,
}

impl<T: Element> Downsample<T> {
    pub fn new(channels: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Downsample {
            conv: Conv2d::new(
                channels,
                2 * channels,
                2,
                Conv2dSpec::new(2, 0, 1),
                true,
                rng,
            )?,
            norm: LayerNorm::new(2 * channels)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if !shape[2].is_multiple_of(2) || !shape[3].is_multiple_of(2) {
            return Err(SpachError::Resolution(format!(
                "cannot halve odd extents {}x{}",
                shape[2], shape[3]
            )));
        }
        let y = self.conv.forward(g, x)?;
        self.norm.forward_channels(g, y)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.conv.collect(&format!("{prefix}.conv"), out);
        self.norm.collect(&format!("{prefix}.norm"), out);
    }
}

/// Norm -> global average pool -> linear classifier.
#[derive(Debug)]
pub struct Head<T> {
    pub norm: LayerNorm<T>,
    pub fc: Linear<T>,
}

impl<T: Element> Head<T> {
    pub fn new(channels: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Head {
            norm: LayerNorm::new(channels)?,
            fc: Linear::new(channels, classes, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.norm.forward_channels(g, x)?;
        let pooled = g.mean_axes(y, &[2, 3])?;
        self.fc.forward(g, pooled)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.norm.collect(&format!("{prefix}.norm"), out);
        self.fc.collect(&format!("{prefix}.fc"), out);
    }
}

#[derive(Debug)]
pub struct Stage<T> {
    /// Present on every stage but the first.
    pub downsample: Option<Downsample<T>>,
    pub blocks: Vec<MixingBlock<T>>,
    pub width: usize,
}

/// A realized backbone with classifier.
#[derive(Debug)]
pub struct Model<T> {
    config: ModelConfig,
    pub embed: PatchEmbed<T>,
    pub stages: Vec<Stage<T>>,
    pub head: Head<T>,
}

impl<T: Element> Model<T> {
    /// Builds and initializes a model; all randomness comes from `rng`.
    pub fn build(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c0 = config.stage_width(0);
        let embed = match config.patch_embed {
            PatchEmbedKind::Default => PatchEmbed::default_embed(config.patch_size(), c0, rng)?,
            PatchEmbedKind::Deep => PatchEmbed::deep(c0, rng)?,
        };
        let mut stages = Vec::with_capacity(config.num_stages());
        let mut index = 0;
        for s in 0..config.num_stages() {
            let width = config.stage_width(s);
            let downsample = if s > 0 {
                Some(Downsample::new(config.stage_width(s - 1), rng)?)
            } else {
                None
            };
            let (h, w) = config.stage_extent(s, config.input_resolution);
            // Sharing scope is one stage (the only stage for single-stage models),
            // split by mixer kind so hybrid stages keep one mixer per kind.
            let mut shared: HashMap<SpatialKind, Arc<SpatialMixer<T>>> = HashMap::new();
            let mut blocks = Vec::with_capacity(config.block_counts[s]);
            for b in 0..config.block_counts[s] {
                let kind = config.block_kind(s, b);
                let mut spec = MixingBlockSpec::new(kind, width, config.expansion_ratio, h * w);
                spec.head_dim = config.head_dim;
                spec.token_expansion = config.token_expansion;
                spec.drop_path_rate = config.drop_path_rate(index);
                index += 1;
                let block = if config.weight_sharing {
                    spec.share_group = Some(s);
                    let mixer = match shared.get(&kind) {
                        Some(m) => m.clone(),
                        None => {
                            let m = Arc::new(SpatialMixer::new(&spec, rng)?);
                            shared.insert(kind, m.clone());
                            m
                        }
                    };
                    MixingBlock::with_spatial(&spec, mixer, rng)?
                } else {
                    MixingBlock::new(&spec, rng)?
                };
                blocks.push(block);
            }
            stages.push(Stage {
                downsample,
                blocks,
                width,
            });
        }
        let last = config.stage_width(config.num_stages() - 1);
        let head = Head::new(last, config.num_classes, rng)?;
        Ok(Model {
            config: config.clone(),
            embed,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Image batch `[N,3,H,W]` to logits `[N,num_classes]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() == 4 {
            self.config.check_resolution((shape[2], shape[3]))?;
        }
        let mut h = self.embed.forward(g, x)?;
        for stage in &self.stages {
            if let Some(d) = &stage.downsample {
                h = d.forward(g, h)?;
            }
            for block in &stage.blocks {
                h = block.forward(g, h, ctx)?;
            }
        }
        self.head.forward(g, h)
    }

    /// Eval-mode logits for a batch.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let y = self.forward(&mut g, x, &mut Ctx::eval())?;
        Ok(g.value(y).clone())
    }

    /// Every parameter under its hierarchical name, aliases included.
    pub fn parameters_with_aliases(&self) -> NamedParams<T> {
        let mut out = Vec::new();
        self.embed.collect("embed", &mut out);
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(d) = &stage.downsample {
                d.collect(&format!("stage{s}.downsample"), &mut out);
            }
            for (b, block) in stage.blocks.iter().enumerate() {
                block.collect(&format!("stage{s}.block{b}"), &mut out);
            }
        }
        self.head.collect("head", &mut out);
        out
    }

    /// Distinct parameters; a shared tensor appears once, under its first name.
    pub fn named_parameters(&self) -> NamedParams<T> {
        let mut seen = HashSet::new();
        self.parameters_with_aliases()
            .into_iter()
            .filter(|(_, p)| seen.insert(p.storage_id()))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.named_parameters().iter().map(|(_, p)| p.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.named_parameters() {
            p.zero_grad();
        }
    }

    pub fn state(&self) -> Vec<(String, AnyTensor)> {
        self.named_parameters()
            .into_iter()
            .map(|(name, p)| (name, AnyTensor::from_tensor(&p.value())))
            .collect()
    }

    /// Restores parameters from a name-to-tensor list; every parameter must be present.
    pub fn load_state(&self, entries: &[(String, AnyTensor)]) -> Result<()> {
        let map: HashMap<&str, &AnyTensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, p) in self.named_parameters() {
            let t = map
                .get(name.as_str())
                .ok_or_else(|| SpachError::Format(format!("checkpoint lacks '{name}'")))?;
            if t.shape() != p.shape().as_slice() {
                return Err(SpachError::Format(format!(
                    "'{name}' has shape {:?} in checkpoint, model expects {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            p.set_value(t.to_tensor())?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(checkpoint::save_checkpoint(path, &self.state())?)
    }

    pub fn load(&self, path: impl AsRef<Path>) -> Result<()> {
        self.load_state(&checkpoint::load_checkpoint(path)?)
    }

    /// Checks that `resolution` can be fed to this model.
    ///
    /// Token-MLP mixers are sized for the configured resolution and accept no other.
    pub fn check_input_resolution(&self, resolution: (usize, usize)) -> Result<()> {
        self.config.check_resolution(resolution)?;
        let has_mlp = self
            .stages
            .iter()
            .flat_map(|s| &s.blocks)
            .any(|b| b.spatial.kind() == SpatialKind::Mlp);
        if has_mlp && resolution != self.config.input_resolution {
            let (h, w) = self.config.input_resolution;
            return Err(SpachError::Resolution(format!(
                "token-MLP model built for {h}x{w} cannot take {}x{}",
                resolution.0, resolution.1
            )));
        }
        Ok(())
    }

    /// Resets the linear stochastic-depth ramp to end at `max`.
    pub fn set_drop_path_max(&mut self, max: f64) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.drop_path_max = max;
        cfg.validate()?;
        let mut index = 0;
        for stage in &mut self.stages {
            for block in &mut stage.blocks {
                block.drop_path_rate = cfg.drop_path_rate(index);
                index += 1;
            }
        }
        self.config = cfg;
        Ok(())
    }

    /// Spatial extents after each stage for the configured resolution.
    pub fn stage_extents(&self) -> Vec<(usize, usize)> {
        (0..self.stages.len())
            .map(|s| self.config.stage_extent(s, self.config.input_resolution))
            .collect()
    }

    pub fn is_multi_stage(&self) -> bool {
        self.config.framework == Framework::MultiStage
    }
}
