use std::collections::HashSet;

use spach::assembly::{
    hybridize, preset, preset_by_name, Framework, Model, PatchEmbed, Scale, Structure, HYBRID_MS_S,
    HYBRID_MS_XS, PRESET_NAMES,
};
use spach::mixing::SpatialKind;
use spach::nn::Ctx;
use spach::SpachError;
use spach_tensor::{Graph, Rng, Target, Tensor};

fn build(name: &str) -> Model<f32> {
    Model::build(&preset_by_name(name).unwrap(), &mut Rng::seed(0)).unwrap()
}

#[test]
fn every_preset_trains_one_step_at_its_resolution() {
    for name in PRESET_NAMES {
        let model = build(name);
        let (h, w) = model.config().input_resolution;
        let classes = model.config().num_classes;
        let x = Rng::seed(1).randn::<f32>([1, 3, h, w]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let logits = model
            .forward(&mut g, xv, &mut Ctx::train(Rng::seed(2)))
            .unwrap();
        assert_eq!(g.shape(logits), &[1, classes], "{name}");
        assert!(g.value(logits).is_finite(), "{name}");
        let loss = g
            .cross_entropy(logits, Target::Classes(vec![classes - 1]))
            .unwrap();
        assert!(g.value(loss).is_finite());
        g.backward(loss).unwrap();
        for (pname, p) in model.named_parameters() {
            let grad = p
                .grad()
                .unwrap_or_else(|| panic!("{name}: {pname} has no gradient"));
            assert!(grad.is_finite(), "{name}: {pname}");
        }
    }
}

#[test]
fn multi_stage_extents_halve_from_56() {
    let model = build("conv-ms-xxs");
    assert_eq!(
        model.stage_extents(),
        vec![(56, 56), (28, 28), (14, 14), (7, 7)]
    );
    let widths: Vec<usize> = model.stages.iter().map(|s| s.width).collect();
    assert_eq!(widths, vec![64, 128, 256, 512]);
}

#[test]
fn first_stage_is_convolutional_in_every_multi_stage_model() {
    for name in ["trans-ms-xxs", "mlp-ms-xs", "hybrid-ms-s+"] {
        let model = build(name);
        assert!(
            model.stages[0]
                .blocks
                .iter()
                .all(|b| b.spatial.kind() == SpatialKind::Conv),
            "{name}"
        );
        assert!(model.stages[1..]
            .iter()
            .flat_map(|s| &s.blocks)
            .any(|b| b.spatial.kind() != SpatialKind::Conv));
    }
}

#[test]
fn embedding_shapes() {
    let mut rng = Rng::seed(3);
    let run = |embed: &PatchEmbed<f32>, c: usize| {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 3, 224, 224]).unwrap());
        let y = embed.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y)[1], c);
        g.shape(y).to_vec()
    };
    assert_eq!(
        run(&PatchEmbed::default_embed(16, 192, &mut rng).unwrap(), 192),
        vec![1, 192, 14, 14]
    );
    assert_eq!(
        run(&PatchEmbed::default_embed(4, 64, &mut rng).unwrap(), 64),
        vec![1, 64, 56, 56]
    );
    assert_eq!(
        run(&PatchEmbed::deep(128, &mut rng).unwrap(), 128),
        vec![1, 128, 56, 56]
    );
}

#[test]
fn averaging_patch_embedding_preserves_constant_images() {
    let mut rng = Rng::seed(4);
    let embed = PatchEmbed::<f64>::default_embed(4, 5, &mut rng).unwrap();
    let PatchEmbed::Default { conv, .. } = &embed else {
        unreachable!()
    };
    conv.weight
        .set_value(Tensor::full([5, 3, 4, 4], 1.0 / 48.0).unwrap())
        .unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::full([1, 3, 8, 8], 0.37).unwrap());
    let y = embed.forward(&mut g, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.37).abs() < 1e-12));
}

#[test]
fn deep_embedding_kernel_count() {
    let embed = PatchEmbed::<f32>::deep(128, &mut Rng::seed(5)).unwrap();
    let kernels: usize = embed.convs().iter().map(|c| c.weight.numel()).sum();
    assert_eq!(kernels, 115_904);
    let biases: usize = embed
        .convs()
        .iter()
        .map(|c| c.bias.as_ref().unwrap().numel())
        .sum();
    assert_eq!(biases, 64 * 3 + 128);
}

#[test]
fn zero_deep_embedding_outputs_zero() {
    let embed = PatchEmbed::<f64>::deep(8, &mut Rng::seed(6)).unwrap();
    for c in embed.convs() {
        c.weight.set_value(c.weight.value().zeros_like()).unwrap();
    }
    let mut g = Graph::new();
    let x = g.constant(Rng::seed(7).randn::<f64>([1, 3, 16, 16]).unwrap());
    let y = embed.forward(&mut g, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn indivisible_resolution_is_a_resolution_error() {
    let model = build("conv-ms-xxs");
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1, 3, 100, 100]).unwrap());
    assert!(matches!(
        model.forward(&mut g, x, &mut Ctx::eval()),
        Err(SpachError::Resolution(_))
    ));
}

#[test]
fn mlp_models_refuse_other_resolutions_at_forward() {
    let model = build("desk-mlp");
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1, 3, 64, 64]).unwrap());
    assert!(matches!(
        model.forward(&mut g, x, &mut Ctx::eval()),
        Err(SpachError::Resolution(_))
    ));
    // Conv models of the same layout accept it.
    let conv = build("desk-conv");
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1, 3, 64, 64]).unwrap());
    assert!(conv.forward(&mut g, x, &mut Ctx::eval()).is_ok());
}

fn distinct_spatial_tensors(model: &Model<f32>) -> usize {
    let mut ids = HashSet::new();
    for stage in &model.stages {
        for block in &stage.blocks {
            let mut p = Vec::new();
            block.spatial.collect("s", &mut p);
            let w = p
                .iter()
                .find(|(n, _)| n.ends_with("fc1.weight") || n.ends_with("dw.weight"))
                .unwrap();
            ids.insert(w.1.storage_id());
        }
    }
    ids.len()
}

#[test]
fn sharing_scopes() {
    let single = Model::<f32>::build(
        &preset_by_name("mlp-xxs")
            .unwrap()
            .with_overrides(&["weight_sharing=true"])
            .unwrap(),
        &mut Rng::seed(0),
    )
    .unwrap();
    assert_eq!(distinct_spatial_tensors(&single), 1);
    let multi = Model::<f32>::build(
        &preset_by_name("mlp-ms-xxs")
            .unwrap()
            .with_overrides(&["weight_sharing=true"])
            .unwrap(),
        &mut Rng::seed(0),
    )
    .unwrap();
    assert_eq!(distinct_spatial_tensors(&multi), 4);
    assert_eq!(distinct_spatial_tensors(&build("mlp-ms-xxs")), 12);
}

#[test]
fn hybridize_changes_only_spatial_kinds() {
    for (scale, plan) in [(Scale::Xs, HYBRID_MS_XS), (Scale::S, HYBRID_MS_S)] {
        let base_cfg = preset(Structure::Conv, scale, Framework::MultiStage).unwrap();
        let base = Model::<f32>::build(&base_cfg, &mut Rng::seed(0)).unwrap();
        let hyb =
            Model::<f32>::build(&hybridize(&base_cfg, &plan).unwrap(), &mut Rng::seed(0)).unwrap();
        for (s, (a, b)) in base.stages.iter().zip(&hyb.stages).enumerate() {
            assert_eq!(a.width, b.width);
            assert_eq!(a.blocks.len(), b.blocks.len());
            let n = a.blocks.len();
            for (j, (x, y)) in a.blocks.iter().zip(&b.blocks).enumerate() {
                let (mut px, mut py) = (Vec::new(), Vec::new());
                x.channel.collect("c", &mut px);
                y.channel.collect("c", &mut py);
                let shapes = |p: &Vec<(String, spach_tensor::Parameter<f32>)>| {
                    p.iter().map(|(_, t)| t.shape()).collect::<Vec<_>>()
                };
                assert_eq!(shapes(&px), shapes(&py));
                let expect = if j + plan[s] >= n {
                    SpatialKind::Attention
                } else {
                    SpatialKind::Conv
                };
                assert_eq!(y.spatial.kind(), expect);
                assert_eq!(y.spatial.has_cpe(), expect == SpatialKind::Attention);
            }
        }
    }
}

#[test]
fn build_is_deterministic_and_checkpoints_round_trip() {
    let cfg = preset_by_name("desk-hybrid").unwrap();
    let a = Model::<f32>::build(&cfg, &mut Rng::seed(9)).unwrap();
    let b = Model::<f32>::build(&cfg, &mut Rng::seed(9)).unwrap();
    assert_eq!(a.state(), b.state());
    let c = Model::<f32>::build(&cfg, &mut Rng::seed(10)).unwrap();
    assert_ne!(a.state(), c.state());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.spt");
    a.save(&path).unwrap();
    c.load(&path).unwrap();
    assert_eq!(a.state(), c.state());
    let x = Rng::seed(1).randn::<f32>([2, 3, 32, 32]).unwrap();
    assert_eq!(a.predict(&x).unwrap(), c.predict(&x).unwrap());
    let names: Vec<String> = a.state().into_iter().map(|(n, _)| n).collect();
    assert!(names.contains(&"stage2.block1.spatial.q.weight".to_string()));
    assert!(names.contains(&"stage1.downsample.conv.weight".to_string()));
}

#[test]
fn checkpoint_for_other_model_is_rejected() {
    let a = build("desk-conv");
    let b = build("desk-trans");
    assert!(matches!(
        b.load_state(&a.state()),
        Err(SpachError::Format(_))
    ));
}
