use super::config::{Framework, ModelConfig, PatchEmbedKind, Scale, Structure};
use crate::error::{config_err, Result};
use crate::mixing::DEFAULT_HEAD_DIM;

/// Trailing attention blocks per stage for Hybrid-MS-XS (over Conv-MS-XS).
pub const HYBRID_MS_XS: [usize; 4] = [0, 0, 10, 2];
/// Trailing attention blocks per stage for Hybrid-MS-S (over Conv-MS-S).
pub const HYBRID_MS_S: [usize; 4] = [0, 2, 10, 2];

pub const IMAGENET_CLASSES: usize = 1000;
pub const DEFAULT_RESOLUTION: (usize, usize) = (224, 224);

/// Width, expansion ratio and block counts for one preset.
fn preset_entry(
    structure: Structure,
    scale: Scale,
    framework: Framework,
) -> Option<(usize, f64, Vec<usize>)> {
    use Framework::*;
    use Scale::*;
    use Structure::*;
    let e = match (framework, structure, scale) {
        (SingleStage, Conv | Mlp, Xxs) => (384, 2.0, vec![12]),
        (SingleStage, Conv | Mlp, Xs) => (384, 2.0, vec![24]),
        (SingleStage, Conv | Mlp, S) => (512, 3.0, vec![24]),
        (SingleStage, Attention, Xxs) => (192, 2.0, vec![12]),
        (SingleStage, Attention, Xs) => (384, 2.0, vec![12]),
        (SingleStage, Attention, S) => (512, 3.0, vec![12]),
        (MultiStage, Conv | Mlp, Xxs) => (64, 2.0, vec![2, 2, 6, 2]),
        (MultiStage, Conv | Mlp, Xs) => (96, 2.0, vec![3, 4, 12, 3]),
        (MultiStage, Conv | Mlp, S) => (128, 3.0, vec![3, 4, 12, 3]),
        (MultiStage, Attention, Xxs) => (32, 2.0, vec![2, 2, 6, 2]),
        (MultiStage, Attention, Xs) => (64, 2.0, vec![3, 4, 12, 3]),
        (MultiStage, Attention, S) => (96, 3.0, vec![3, 4, 12, 3]),
        _ => return None,
    };
    Some(e)
}

/// Preset hyperparameters for a (structure, scale, framework) triple.
pub fn preset(structure: Structure, scale: Scale, framework: Framework) -> Result<ModelConfig> {
    if scale == Scale::Desk {
        return desk_preset(structure);
    }
    let (c, r, n) = preset_entry(structure, scale, framework)
        .ok_or_else(|| config_err(format!("no preset for {structure} {scale} {framework}")))?;
    Ok(ModelConfig {
        framework,
        structure,
        scale,
        base_channels: c,
        expansion_ratio: r,
        block_counts: n,
        patch_embed: PatchEmbedKind::Default,
        input_resolution: DEFAULT_RESOLUTION,
        num_classes: IMAGENET_CLASSES,
        weight_sharing: false,
        hybrid_plan: Vec::new(),
        drop_path_max: if scale == Scale::S { 0.1 } else { 0.0 },
        head_dim: DEFAULT_HEAD_DIM,
        token_expansion: match framework {
            Framework::SingleStage => 1.0,
            Framework::MultiStage => 0.5,
        },
    })
}

/// Small multi-stage models for 32x32 inputs and 10 classes.
pub fn desk_preset(structure: Structure) -> Result<ModelConfig> {
    let base = ModelConfig {
        framework: Framework::MultiStage,
        structure: Structure::Conv,
        scale: Scale::Desk,
        base_channels: 16,
        expansion_ratio: 2.0,
        block_counts: vec![1, 1, 2, 1],
        patch_embed: PatchEmbedKind::Default,
        input_resolution: (32, 32),
        num_classes: 10,
        weight_sharing: false,
        hybrid_plan: Vec::new(),
        drop_path_max: 0.0,
        head_dim: DEFAULT_HEAD_DIM,
        token_expansion: 0.5,
    };
    match structure {
        Structure::Hybrid => hybridize(&base, &[0, 0, 1, 1]),
        s => Ok(ModelConfig {
            structure: s,
            ..base
        }),
    }
}

/// Turns the trailing `plan[s]` blocks of each stage of a multi-stage conv config
/// into attention blocks. An empty or all-zero plan returns the base unchanged.
pub fn hybridize(base: &ModelConfig, plan: &[usize]) -> Result<ModelConfig> {
    if base.framework != Framework::MultiStage || base.structure != Structure::Conv {
        return Err(config_err("hybridize needs a multi-stage conv base"));
    }
    if plan.iter().all(|&r| r == 0) {
        return Ok(base.clone());
    }
    let cfg = ModelConfig {
        structure: Structure::Hybrid,
        hybrid_plan: plan.to_vec(),
        ..base.clone()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Every named preset, in listing order.
pub const PRESET_NAMES: [&str; 26] = [
    "conv-xxs",
    "conv-xs",
    "conv-s",
    "trans-xxs",
    "trans-xs",
    "trans-s",
    "mlp-xxs",
    "mlp-xs",
    "mlp-s",
    "conv-ms-xxs",
    "conv-ms-xs",
    "conv-ms-s",
    "trans-ms-xxs",
    "trans-ms-xs",
    "trans-ms-s",
    "mlp-ms-xxs",
    "mlp-ms-xs",
    "mlp-ms-s",
    "hybrid-ms-xs",
    "hybrid-ms-s",
    "hybrid-ms-xs+",
    "hybrid-ms-s+",
    "desk-conv",
    "desk-trans",
    "desk-mlp",
    "desk-hybrid",
];

/// Resolves a preset name such as `conv-ms-xxs`, `trans-s` or `hybrid-ms-s+`.
///
/// A trailing `+` (or `-plus`) selects the deep patch embedding on multi-stage models.
pub fn preset_by_name(name: &str) -> Result<ModelConfig> {
    let lower = name.trim().to_ascii_lowercase();
    let (stem, deep) = if let Some(s) = lower.strip_suffix('+') {
        (s, true)
    } else if let Some(s) = lower.strip_suffix("-plus") {
        (s, true)
    } else {
        (lower.as_str(), false)
    };
    let unknown = || config_err(format!("unknown preset '{name}'"));
    let parts: Vec<&str> = stem.split('-').collect();
    let mut cfg = match parts.as_slice() {
        ["desk", s] => desk_preset(parse_structure(s).ok_or_else(unknown)?)?,
        [s, "ms", scale] => {
            let scale = parse_scale(scale).ok_or_else(unknown)?;
            match parse_structure(s).ok_or_else(unknown)? {
                Structure::Hybrid => {
                    let (plan, base_scale) = match scale {
                        Scale::Xs => (HYBRID_MS_XS, Scale::Xs),
                        Scale::S => (HYBRID_MS_S, Scale::S),
                        _ => return Err(unknown()),
                    };
                    let base = preset(Structure::Conv, base_scale, Framework::MultiStage)?;
                    hybridize(&base, &plan)?
                }
                st => preset(st, scale, Framework::MultiStage)?,
            }
        }
        [s, scale] => {
            let st = parse_structure(s).ok_or_else(unknown)?;
            if st == Structure::Hybrid {
                return Err(unknown());
            }
            preset(
                st,
                parse_scale(scale).ok_or_else(unknown)?,
                Framework::SingleStage,
            )?
        }
        _ => return Err(unknown()),
    };
    if deep {
        if cfg.framework != Framework::MultiStage {
            return Err(config_err(format!(
                "preset '{name}': deep patch embedding needs a multi-stage model"
            )));
        }
        cfg.patch_embed = PatchEmbedKind::Deep;
    }
    Ok(cfg)
}

fn parse_structure(s: &str) -> Option<Structure> {
    match s {
        "conv" => Some(Structure::Conv),
        "trans" | "attention" => Some(Structure::Attention),
        "mlp" => Some(Structure::Mlp),
        "hybrid" => Some(Structure::Hybrid),
        _ => None,
    }
}

fn parse_scale(s: &str) -> Option<Scale> {
    match s {
        "xxs" => Some(Scale::Xxs),
        "xs" => Some(Scale::Xs),
        "s" => Some(Scale::S),
        _ => None,
    }
}
