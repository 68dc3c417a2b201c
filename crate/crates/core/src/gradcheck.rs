//! Finite-difference verification of every differentiable primitive and mixer at f64.
//!
//! Each check draws random inputs and parameters, forms the scalar
//! `L = sum(out * R)` for a fixed random `R`, and compares the autograd gradient
//! of every input element against a central difference with step `1e-5`.
//! The per-element error is `|a - n| / max(|a|, |n|, 1e-3)`.

use spach_tensor::{Conv2dSpec, Graph, Parameter, Rng, Target, Tensor, Var};

use crate::assembly::{hybridize, Downsample, Model, ModelConfig, PatchEmbed, Structure};
use crate::error::{config_err, Result};
use crate::mixing::{cpe, ChannelMixer, MixingBlock, MixingBlockSpec, SpatialKind, SpatialMixer};
use crate::nn::{Ctx, NamedParams};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
const ERROR_FLOOR: f64 = 1e-3;
/// Elements probed per tensor; larger tensors are sampled.
const MAX_PROBES: usize = 24;

/// Every check, in run order.
pub const CHECK_NAMES: [&str; 33] = [
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "matmul",
    "bmm",
    "conv2d_dense",
    "conv2d_grouped",
    "conv2d_depthwise",
    "conv2d_pointwise",
    "layernorm",
    "softmax",
    "gelu",
    "permute",
    "transpose",
    "reshape",
    "mean_axes",
    "sum",
    "cross_entropy",
    "cross_entropy_soft",
    "scale_samples",
    "cpe",
    "conv_mixer",
    "attention_mixer",
    "mlp_mixer",
    "channel_mixer",
    "block_conv",
    "block_attention",
    "block_mlp",
    "patch_embed_deep",
    "downsample",
    "model_hybrid",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    /// Number of probed elements.
    pub probes: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

type Forward = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Inputs bound as graph leaves plus parameters reached inside `forward`.
struct Case {
    inputs: Vec<Parameter<f64>>,
    internal: Vec<Parameter<f64>>,
    forward: Forward,
}

impl Case {
    fn new(
        inputs: Vec<Tensor<f64>>,
        forward: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Case {
            inputs: inputs.into_iter().map(Parameter::new).collect(),
            internal: Vec::new(),
            forward: Box::new(forward),
        }
    }

    fn with_internal(mut self, params: NamedParams<f64>) -> Self {
        self.internal = params.into_iter().map(|(_, p)| p).collect();
        self
    }

    fn output(&self, g: &mut Graph<f64>) -> Result<Var> {
        let vars: Vec<Var> = self.inputs.iter().map(|p| g.param(p)).collect();
        (self.forward)(g, &vars)
    }

    fn loss(&self, weights: &Tensor<f64>) -> Result<f64> {
        let mut g = Graph::new();
        let out = self.output(&mut g)?;
        Ok(g.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum())
    }
}

fn randn(rng: &mut Rng, shape: &[usize], std: f64) -> Result<Tensor<f64>> {
    Ok(rng.randn::<f64>(shape.to_vec())?.map(|v| v * std))
}

/// Replaces every parameter with larger random values so gradients are not tiny.
/// Norm gains stay near one.
fn rerandomize(params: &NamedParams<f64>, rng: &mut Rng) -> Result<()> {
    for (name, p) in params {
        let t = randn(rng, &p.shape(), 0.5)?;
        let t = if name.ends_with("gamma") {
            t.map(|v| 1.0 + v)
        } else {
            t
        };
        p.set_value(t)?;
    }
    Ok(())
}

fn block_spec(kind: SpatialKind) -> MixingBlockSpec {
    let mut spec = MixingBlockSpec::new(kind, 8, 1.5, 9);
    spec.head_dim = 4;
    spec
}

fn build_case(name: &str, rng: &mut Rng) -> Result<Case> {
    let mut r = |shape: &[usize]| randn(rng, shape, 1.0);
    let case = match name {
        "add" => Case::new(
            vec![r(&[3, 4])?, r(&[3, 4])?],
            |g, v| Ok(g.add(v[0], v[1])?),
        ),
        "sub" => Case::new(
            vec![r(&[3, 4])?, r(&[3, 4])?],
            |g, v| Ok(g.sub(v[0], v[1])?),
        ),
        "mul" => Case::new(
            vec![r(&[3, 4])?, r(&[3, 4])?],
            |g, v| Ok(g.mul(v[0], v[1])?),
        ),
        "scale" => Case::new(vec![r(&[5])?], |g, v| Ok(g.scale(v[0], -1.7))),
        "add_bias" => Case::new(vec![r(&[2, 3, 4])?, r(&[3])?], |g, v| {
            Ok(g.add_bias(v[0], v[1], 1)?)
        }),
        "matmul" => Case::new(vec![r(&[3, 4])?, r(&[4, 5])?], |g, v| {
            Ok(g.matmul(v[0], v[1])?)
        }),
        "bmm" => Case::new(vec![r(&[2, 3, 4])?, r(&[2, 4, 2])?], |g, v| {
            Ok(g.bmm(v[0], v[1])?)
        }),
        "conv2d_dense" => Case::new(
            vec![r(&[2, 3, 5, 5])?, r(&[4, 3, 3, 3])?, r(&[4])?],
            |g, v| Ok(g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new(2, 1, 1))?),
        ),
        "conv2d_grouped" => Case::new(
            vec![r(&[2, 4, 4, 4])?, r(&[6, 2, 3, 3])?, r(&[6])?],
            |g, v| Ok(g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new(1, 1, 2))?),
        ),
        "conv2d_depthwise" => Case::new(vec![r(&[2, 3, 5, 4])?, r(&[3, 1, 3, 3])?], |g, v| {
            Ok(g.conv2d(v[0], v[1], None, Conv2dSpec::new(1, 1, 3))?)
        }),
        "conv2d_pointwise" => Case::new(
            vec![r(&[2, 3, 3, 3])?, r(&[4, 3, 1, 1])?, r(&[4])?],
            |g, v| Ok(g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::default())?),
        ),
        "layernorm" => Case::new(vec![r(&[4, 6])?, r(&[6])?, r(&[6])?], |g, v| {
            Ok(g.layernorm(v[0], v[1], v[2], 1e-6)?)
        }),
        "softmax" => Case::new(vec![r(&[3, 4, 2])?], |g, v| Ok(g.softmax(v[0], 1)?)),
        "gelu" => Case::new(vec![r(&[10])?.map(|x| 2.0 * x)], |g, v| Ok(g.gelu(v[0]))),
        "permute" => Case::new(
            vec![r(&[2, 3, 4])?],
            |g, v| Ok(g.permute(v[0], &[2, 0, 1])?),
        ),
        "transpose" => Case::new(vec![r(&[2, 3, 4])?], |g, v| Ok(g.transpose(v[0], 0, 2)?)),
        "reshape" => Case::new(vec![r(&[2, 6])?], |g, v| Ok(g.reshape(v[0], &[3, 4])?)),
        "mean_axes" => Case::new(vec![r(&[2, 3, 4, 2])?], |g, v| {
            Ok(g.mean_axes(v[0], &[1, 3])?)
        }),
        "sum" => Case::new(vec![r(&[3, 3])?], |g, v| Ok(g.sum(v[0]))),
        "cross_entropy" => Case::new(vec![r(&[4, 5])?], |g, v| {
            Ok(g.cross_entropy(v[0], Target::Classes(vec![0, 3, 4, 3]))?)
        }),
        "cross_entropy_soft" => {
            let probs = r(&[3, 4])?.map(f64::exp);
            let probs = Tensor::from_fn([3, 4], |i| {
                let row = &probs.data()[i / 4 * 4..i / 4 * 4 + 4];
                probs.data()[i] / row.iter().sum::<f64>()
            })?;
            Case::new(vec![r(&[3, 4])?], move |g, v| {
                Ok(g.cross_entropy(v[0], Target::Probabilities(probs.clone()))?)
            })
        }
        "scale_samples" => Case::new(vec![r(&[3, 2, 2])?], |g, v| {
            Ok(g.scale_samples(v[0], vec![0.0, 1.25, 2.0])?)
        }),
        "cpe" => Case::new(vec![r(&[2, 3, 4, 4])?, r(&[3, 1, 3, 3])?], |g, v| {
            cpe(g, v[0], v[1])
        }),
        "conv_mixer" | "attention_mixer" | "mlp_mixer" => {
            let kind = match name {
                "conv_mixer" => SpatialKind::Conv,
                "attention_mixer" => SpatialKind::Attention,
                _ => SpatialKind::Mlp,
            };
            let mixer = SpatialMixer::<f64>::new(&block_spec(kind), rng)?;
            let mut params = Vec::new();
            mixer.collect("m", &mut params);
            rerandomize(&params, rng)?;
            Case::new(vec![randn(rng, &[2, 8, 3, 3], 1.0)?], move |g, v| {
                mixer.forward(g, v[0])
            })
            .with_internal(params)
        }
        "channel_mixer" => {
            let mixer = ChannelMixer::<f64>::new(&block_spec(SpatialKind::Conv), rng)?;
            let mut params = Vec::new();
            mixer.collect("m", &mut params);
            rerandomize(&params, rng)?;
            Case::new(vec![randn(rng, &[2, 8, 3, 3], 1.0)?], move |g, v| {
                mixer.forward(g, v[0])
            })
            .with_internal(params)
        }
        "block_conv" | "block_attention" | "block_mlp" => {
            let kind = match name {
                "block_conv" => SpatialKind::Conv,
                "block_attention" => SpatialKind::Attention,
                _ => SpatialKind::Mlp,
            };
            let block = MixingBlock::<f64>::new(&block_spec(kind), rng)?;
            let mut params = Vec::new();
            block.collect("b", &mut params);
            rerandomize(&params, rng)?;
            Case::new(vec![randn(rng, &[2, 8, 3, 3], 1.0)?], move |g, v| {
                block.forward(g, v[0], &mut Ctx::eval())
            })
            .with_internal(params)
        }
        "patch_embed_deep" => {
            let embed = PatchEmbed::<f64>::deep(4, rng)?;
            let mut params = Vec::new();
            embed.collect("e", &mut params);
            rerandomize(&params, rng)?;
            Case::new(vec![randn(rng, &[1, 3, 8, 8], 1.0)?], move |g, v| {
                embed.forward(g, v[0])
            })
            .with_internal(params)
        }
        "downsample" => {
            let down = Downsample::<f64>::new(3, rng)?;
            let mut params = Vec::new();
            down.collect("d", &mut params);
            rerandomize(&params, rng)?;
            Case::new(vec![randn(rng, &[2, 3, 4, 4], 1.0)?], move |g, v| {
                down.forward(g, v[0])
            })
            .with_internal(params)
        }
        "model_hybrid" => {
            let model = Model::<f64>::build(&tiny_hybrid()?, rng)?;
            let params = model.named_parameters();
            rerandomize(&params, rng)?;
            Case::new(vec![randn(rng, &[2, 3, 32, 32], 1.0)?], move |g, v| {
                model.forward(g, v[0], &mut Ctx::eval())
            })
            .with_internal(params)
        }
        _ => return Err(config_err(format!("unknown gradcheck op '{name}'"))),
    };
    Ok(case)
}

/// Four-stage model with conv and attention blocks, small enough for finite differences.
fn tiny_hybrid() -> Result<ModelConfig> {
    let mut base = crate::assembly::desk_preset(Structure::Conv)?;
    base.base_channels = 4;
    base.block_counts = vec![1, 1, 1, 1];
    base.num_classes = 3;
    base.head_dim = 8;
    hybridize(&base, &[0, 1, 1, 1])
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(ERROR_FLOOR)
}

/// Runs one named check. With `corrupt`, the analytic gradient is deliberately
/// skewed so the check must fail; this exercises the harness itself.
pub fn run_check(name: &str, seed: u64, corrupt: bool) -> Result<CheckResult> {
    let mut rng = Rng::seed(seed);
    let case = build_case(name, &mut rng)?;

    let mut g = Graph::new();
    let out = case.output(&mut g)?;
    let weights = randn(&mut rng, g.value(out).shape(), 1.0)?;
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    for p in case.inputs.iter().chain(&case.internal) {
        p.zero_grad();
    }
    g.backward(loss)?;

    let mut max_err: f64 = 0.0;
    let mut probes = 0;
    for p in case.inputs.iter().chain(&case.internal) {
        let grad = p.grad().unwrap_or_else(|| p.value().zeros_like()).map(|v| {
            if corrupt {
                v * 1.05 + 1e-2
            } else {
                v
            }
        });
        let n = p.numel();
        let picks: Vec<usize> = if n <= MAX_PROBES {
            (0..n).collect()
        } else {
            (0..MAX_PROBES).map(|_| rng.below(n)).collect()
        };
        for i in picks {
            let orig = p.value().data()[i];
            p.update(|t| t.data_mut()[i] = orig + FD_STEP);
            let up = case.loss(&weights)?;
            p.update(|t| t.data_mut()[i] = orig - FD_STEP);
            let down = case.loss(&weights)?;
            p.update(|t| t.data_mut()[i] = orig);
            let numeric = (up - down) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(grad.data()[i], numeric));
            probes += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_err: max_err,
        probes,
    })
}

/// Runs the named checks (all when `names` is empty). `corrupt` names one check to skew.
pub fn run_checks(names: &[&str], seed: u64, corrupt: Option<&str>) -> Result<Vec<CheckResult>> {
    let selected: Vec<&str> = if names.is_empty() {
        CHECK_NAMES.to_vec()
    } else {
        names.to_vec()
    };
    for n in &selected {
        if !CHECK_NAMES.contains(n) {
            return Err(config_err(format!("unknown gradcheck op '{n}'")));
        }
    }
    selected
        .into_iter()
        .map(|n| run_check(n, seed, corrupt == Some(n)))
        .collect()
}
