//! Static parameter and multiply-accumulate counts per module.
//!
//! Counts are derived from layer shapes and the input resolution; no forward
//! pass is run. One multiply-accumulate counts as one FLOP, and norms,
//! activations and residual additions are free.

mod report;

use std::collections::HashSet;

use spach_tensor::{kernels::conv_out_extent, Element};

use crate::assembly::Model;
use crate::error::{Result, SpachError};
use crate::mixing::SpatialBody;
use crate::nn::{Conv2d, NamedParams};

pub use report::{parse_machine, AnalysisReport, ReportFormat, ReportRow, COUNTING_CONVENTION};

/// MACs of a convolution on an `h x w` input, with the output extents.
pub fn conv_macs<T: Element>(conv: &Conv2d<T>, h: usize, w: usize) -> Result<(u64, usize, usize)> {
    let shape = conv.weight.shape();
    let (cout, cin_per_group, k) = (shape[0], shape[1], shape[2]);
    let s = conv.spec;
    let oh = conv_out_extent(h, k, s.stride, s.padding)?;
    let ow = conv_out_extent(w, k, s.stride, s.padding)?;
    Ok(((cout * cin_per_group * k * k * oh * ow) as u64, oh, ow))
}

/// Counts parameters not seen before; aliases of already-counted storage add zero.
struct ParamCounter(HashSet<usize>);

impl ParamCounter {
    fn count<T: Element>(&mut self, collect: impl FnOnce(&mut NamedParams<T>)) -> u64 {
        let mut params = Vec::new();
        collect(&mut params);
        params
            .iter()
            .filter(|(_, p)| self.0.insert(p.storage_id()))
            .map(|(_, p)| p.numel() as u64)
            .sum()
    }
}

/// Full breakdown for `model` at `resolution` (`(height, width)`).
pub fn analyze<T: Element>(model: &Model<T>, resolution: (usize, usize)) -> Result<AnalysisReport> {
    let cfg = model.config();
    cfg.check_resolution(resolution)?;
    let mut rows = Vec::new();
    let mut counter = ParamCounter(HashSet::new());

    let (mut h, mut w) = resolution;
    let mut embed_flops = 0;
    for conv in model.embed.convs() {
        let (m, oh, ow) = conv_macs(conv, h, w)?;
        embed_flops += m;
        (h, w) = (oh, ow);
    }
    let embed_params = counter.count(|out| model.embed.collect("embed", out));
    rows.push(ReportRow::new("embed", embed_params, embed_flops));

    for (s, stage) in model.stages.iter().enumerate() {
        if let Some(d) = &stage.downsample {
            let (m, oh, ow) = conv_macs(&d.conv, h, w)?;
            (h, w) = (oh, ow);
            let p = counter.count(|out| d.collect("", out));
            rows.push(ReportRow::new(format!("stage{s}.downsample"), p, m));
        }
        let c = stage.width as u64;
        let t = (h * w) as u64;
        for (b, block) in stage.blocks.iter().enumerate() {
            let prefix = format!("stage{s}.block{b}");
            let mixer = &block.spatial;
            let body_flops = match &mixer.body {
                SpatialBody::Conv { dw } => conv_macs(dw, h, w)?.0,
                SpatialBody::Attention { .. } => 4 * c * c * t + 2 * t * t * c,
                SpatialBody::Mlp { fc1, .. } => {
                    if mixer.tokens() != h * w {
                        return Err(SpachError::Resolution(format!(
                            "token MLP sized for {} positions cannot run on {}x{}",
                            mixer.tokens(),
                            h,
                            w
                        )));
                    }
                    2 * c * t * fc1.out_features() as u64
                }
            };
            let cpe_id = mixer.cpe.as_ref().map(|c| c.weight.storage_id());
            let body_params = counter.count(|out| {
                mixer.collect("", out);
                out.retain(|(_, p)| Some(p.storage_id()) != cpe_id);
            });
            rows.push(ReportRow::new(
                format!("{prefix}.spatial"),
                body_params,
                body_flops,
            ));
            if let Some(cpe) = &mixer.cpe {
                let m = conv_macs(cpe, h, w)?.0;
                let p = counter.count(|out| cpe.collect("", out));
                rows.push(ReportRow::new(format!("{prefix}.cpe"), p, m));
            }
            let hidden = block.channel.hidden() as u64;
            let p = counter.count(|out| block.channel.collect("", out));
            rows.push(ReportRow::new(
                format!("{prefix}.channel"),
                p,
                2 * c * hidden * t,
            ));
        }
    }

    let head_flops = (model.head.fc.in_features() * model.head.fc.out_features()) as u64;
    let head_params = counter.count(|out| model.head.collect("head", out));
    rows.push(ReportRow::new("head", head_params, head_flops));

    Ok(AnalysisReport::new(rows, resolution))
}

/// Distinct stored scalars of `model`.
pub fn count_params<T: Element>(model: &Model<T>) -> Result<u64> {
    Ok(analyze(model, model.config().input_resolution)?.total_params())
}

/// MACs of one forward pass of a single image at `resolution`.
pub fn count_flops<T: Element>(model: &Model<T>, resolution: (usize, usize)) -> Result<u64> {
    Ok(analyze(model, resolution)?.total_flops())
}
