use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, Result, SpachError};
use crate::mixing::{SpatialKind, DEFAULT_HEAD_DIM};

pub const SINGLE_STAGE_PATCH: usize = 16;
pub const MULTI_STAGE_PATCH: usize = 4;
pub const NUM_STAGES: usize = 4;

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = SpachError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(config_err(format!(
                        concat!("unknown ", stringify!($name), " '{}'"),
                        s
                    ))),
                }
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Framework {
    SingleStage,
    MultiStage,
}
text_enum!(Framework { SingleStage => "single_stage", MultiStage => "multi_stage" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Structure {
    Conv,
    Attention,
    Mlp,
    /// Conv backbone with trailing blocks replaced by attention blocks.
    Hybrid,
}
text_enum!(Structure { Conv => "conv", Attention => "attention", Mlp => "mlp", Hybrid => "hybrid" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scale {
    Xxs,
    Xs,
    S,
    /// Scaled-down variants for desk-scale training.
    Desk,
}
text_enum!(Scale { Xxs => "xxs", Xs => "xs", S => "s", Desk => "desk" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PatchEmbedKind {
    /// One `p x p` stride-`p` convolution.
    Default,
    /// Four stacked convolutions, kernels 7/3/3/2, total stride 4.
    Deep,
}
text_enum!(PatchEmbedKind { Default => "default", Deep => "deep" });

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub framework: Framework,
    pub structure: Structure,
    pub scale: Scale,
    pub base_channels: usize,
    pub expansion_ratio: f64,
    /// One entry for single-stage, four for multi-stage.
    pub block_counts: Vec<usize>,
    pub patch_embed: PatchEmbedKind,
    /// `(height, width)`.
    pub input_resolution: (usize, usize),
    pub num_classes: usize,
    pub weight_sharing: bool,
    /// Per-stage number of trailing blocks turned into attention blocks; empty for none.
    pub hybrid_plan: Vec<usize>,
    pub drop_path_max: f64,
    pub head_dim: usize,
    pub token_expansion: f64,
}

impl ModelConfig {
    pub fn num_stages(&self) -> usize {
        match self.framework {
            Framework::SingleStage => 1,
            Framework::MultiStage => NUM_STAGES,
        }
    }

    pub fn patch_size(&self) -> usize {
        match self.framework {
            Framework::SingleStage => SINGLE_STAGE_PATCH,
            Framework::MultiStage => MULTI_STAGE_PATCH,
        }
    }

    /// Overall down-sampling of the last stage relative to the input.
    pub fn total_stride(&self) -> usize {
        self.patch_size() << (self.num_stages() - 1)
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Spatial extents of stage `stage` for a given input resolution.
    pub fn stage_extent(&self, stage: usize, resolution: (usize, usize)) -> (usize, usize) {
        let stride = self.patch_size() << stage;
        (resolution.0 / stride, resolution.1 / stride)
    }

    pub fn total_blocks(&self) -> usize {
        self.block_counts.iter().sum()
    }

    /// Spatial mixer kind of block `block` in stage `stage`.
    pub fn block_kind(&self, stage: usize, block: usize) -> SpatialKind {
        if self.framework == Framework::MultiStage && stage == 0 {
            return SpatialKind::Conv;
        }
        match self.structure {
            Structure::Conv => SpatialKind::Conv,
            Structure::Attention => SpatialKind::Attention,
            Structure::Mlp => SpatialKind::Mlp,
            Structure::Hybrid => {
                let replaced = self.hybrid_plan.get(stage).copied().unwrap_or(0);
                if block + replaced >= self.block_counts[stage] {
                    SpatialKind::Attention
                } else {
                    SpatialKind::Conv
                }
            }
        }
    }

    /// Drop-path rate of the `index`-th block counted over the whole model.
    pub fn drop_path_rate(&self, index: usize) -> f64 {
        let total = self.total_blocks();
        if total <= 1 {
            return 0.0;
        }
        self.drop_path_max * index as f64 / (total - 1) as f64
    }

    /// Checks that the input resolution is compatible with the stage layout.
    pub fn check_resolution(&self, resolution: (usize, usize)) -> Result<()> {
        let stride = self.total_stride();
        let (h, w) = resolution;
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return Err(SpachError::Resolution(format!(
                "{h}x{w} is not divisible by the model stride {stride}"
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(config_err("base_channels must be positive"));
        }
        if !(self.expansion_ratio > 0.0) || !(self.token_expansion > 0.0) {
            return Err(config_err("expansion ratios must be positive"));
        }
        if self.num_classes == 0 {
            return Err(config_err("num_classes must be positive"));
        }
        if self.head_dim == 0 {
            return Err(config_err("head_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path_max) {
            return Err(config_err("drop_path_max must lie in [0, 1)"));
        }
        if self.block_counts.len() != self.num_stages() {
            return Err(config_err(format!(
                "{} framework needs {} block counts, got {}",
                self.framework,
                self.num_stages(),
                self.block_counts.len()
            )));
        }
        if self.block_counts.contains(&0) {
            return Err(config_err("every stage needs at least one block"));
        }
        if self.patch_embed == PatchEmbedKind::Deep && self.framework != Framework::MultiStage {
            return Err(config_err(
                "deep patch embedding requires the multi-stage framework",
            ));
        }
        match self.structure {
            Structure::Hybrid => {
                if self.framework != Framework::MultiStage {
                    return Err(config_err("hybrid models are multi-stage"));
                }
                if self.hybrid_plan.len() != NUM_STAGES {
                    return Err(config_err("hybrid_plan needs one entry per stage"));
                }
                if self.hybrid_plan[0] != 0 {
                    return Err(config_err("the first stage is always convolutional"));
                }
                for (s, (&r, &n)) in self.hybrid_plan.iter().zip(&self.block_counts).enumerate() {
                    if r > n {
                        return Err(config_err(format!(
                            "hybrid_plan replaces {r} blocks of stage {s}, which has {n}"
                        )));
                    }
                }
            }
            _ => {
                if !self.hybrid_plan.is_empty() {
                    return Err(config_err("hybrid_plan is only valid for hybrid structure"));
                }
            }
        }
        self.check_resolution(self.input_resolution)
            .map_err(|e| config_err(e.to_string()))?;
        for stage in 0..self.num_stages() {
            let width = self.stage_width(stage);
            let has_attention = (0..self.block_counts[stage])
                .any(|b| self.block_kind(stage, b) == SpatialKind::Attention);
            let d = self.head_dim.min(width);
            if has_attention && !width.is_multiple_of(d) {
                return Err(config_err(format!(
                    "stage {stage} width {width} not divisible by head_dim {}",
                    self.head_dim
                )));
            }
        }
        Ok(())
    }

    /// Plain-text `key = value` form, one key per line.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        line("framework", self.framework.to_string());
        line("structure", self.structure.to_string());
        line("scale", self.scale.to_string());
        line("base_channels", self.base_channels.to_string());
        line("expansion_ratio", self.expansion_ratio.to_string());
        line("block_counts", list(&self.block_counts));
        line("patch_embed", self.patch_embed.to_string());
        line(
            "input_resolution",
            format!("{}x{}", self.input_resolution.0, self.input_resolution.1),
        );
        line("num_classes", self.num_classes.to_string());
        line("weight_sharing", self.weight_sharing.to_string());
        line("hybrid_plan", list(&self.hybrid_plan));
        line("drop_path_max", self.drop_path_max.to_string());
        line("head_dim", self.head_dim.to_string());
        line("token_expansion", self.token_expansion.to_string());
        out
    }

    /// Parses the text form. Every key is required; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig {
            framework: Framework::SingleStage,
            structure: Structure::Conv,
            scale: Scale::Xxs,
            base_channels: 0,
            expansion_ratio: 0.0,
            block_counts: Vec::new(),
            patch_embed: PatchEmbedKind::Default,
            input_resolution: (0, 0),
            num_classes: 0,
            weight_sharing: false,
            hybrid_plan: Vec::new(),
            drop_path_max: 0.0,
            head_dim: DEFAULT_HEAD_DIM,
            token_expansion: 1.0,
        };
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                config_err(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            cfg.set(key, value.trim())
                .map_err(|e| config_err(format!("line {}: {e}", lineno + 1)))?;
            if seen.contains(&key.to_string()) {
                return Err(config_err(format!(
                    "line {}: duplicate key '{key}'",
                    lineno + 1
                )));
            }
            seen.push(key.to_string());
        }
        for key in KEYS {
            if !seen.iter().any(|s| s == key) {
                return Err(config_err(format!("missing key '{key}'")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text value. Does not re-validate the whole config.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<N: FromStr>(key: &str, v: &str) -> Result<N> {
            v.parse()
                .map_err(|_| config_err(format!("invalid value '{v}' for {key}")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            if v.trim().is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|p| num(key, p.trim())).collect()
        }
        match key {
            "framework" => self.framework = value.parse()?,
            "structure" => self.structure = value.parse()?,
            "scale" => self.scale = value.parse()?,
            "base_channels" => self.base_channels = num(key, value)?,
            "expansion_ratio" => self.expansion_ratio = num(key, value)?,
            "block_counts" => self.block_counts = list(key, value)?,
            "patch_embed" => self.patch_embed = value.parse()?,
            "input_resolution" => self.input_resolution = parse_resolution(value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "weight_sharing" => self.weight_sharing = num(key, value)?,
            "hybrid_plan" => self.hybrid_plan = list(key, value)?,
            "drop_path_max" => self.drop_path_max = num(key, value)?,
            "head_dim" => self.head_dim = num(key, value)?,
            "token_expansion" => self.token_expansion = num(key, value)?,
            _ => return Err(config_err(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order, then validates.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err(format!("override '{o}' is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()?;
        Ok(self)
    }
}

const KEYS: [&str; 14] = [
    "framework",
    "structure",
    "scale",
    "base_channels",
    "expansion_ratio",
    "block_counts",
    "patch_embed",
    "input_resolution",
    "num_classes",
    "weight_sharing",
    "hybrid_plan",
    "drop_path_max",
    "head_dim",
    "token_expansion",
];

/// Parses `HxW` (or a single `N` for square inputs).
pub fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let bad = || config_err(format!("invalid resolution '{s}', expected HxW"));
    let (h, w) = match s.split_once(['x', 'X']) {
        Some((h, w)) => (h.trim(), w.trim()),
        None => (s.trim(), s.trim()),
    };
    let h: usize = h.parse().map_err(|_| bad())?;
    let w: usize = w.parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}
