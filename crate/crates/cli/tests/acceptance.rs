//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line to stderr.

use std::io::Write;
use std::path::Path;
use std::process::Command;

use spach::analysis::parse_machine;
use spach::harness::RunLog;
use spach::mixing::probe::{token_influence, token_mlp_jacobian};
use spach::mixing::{ChannelMixer, MixingBlockSpec, SpatialBody, SpatialKind, SpatialMixer};
use spach::nn::NamedParams;
use spach_tensor::kernels::{self, Conv2dSpec};
use spach_tensor::{Graph, Rng, Tensor};

fn report(criterion: u32, title: &str, lines: &[(String, bool)]) -> bool {
    let ok = lines.iter().all(|(_, ok)| *ok);
    let mut err = std::io::stderr().lock();
    for (detail, pass) in lines {
        let _ = writeln!(err, "    [{}] {detail}", if *pass { "ok" } else { "FAIL" });
    }
    let _ = writeln!(
        err,
        "criterion {criterion} {}: {title}",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

fn spach(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_spach"))
        .args(args)
        .output()
        .expect("spawn spach")
}

/// `(total params, total flops, cpe params, cpe flops)` via the machine report.
fn analyze(args: &[&str]) -> (u64, u64, u64, u64) {
    let mut full = vec!["analyze", "--format", "machine"];
    full.extend_from_slice(args);
    let out = spach(&full);
    assert!(
        out.status.success(),
        "analyze {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = parse_machine(&String::from_utf8(out.stdout).unwrap()).unwrap();
    let total = |f: fn(&spach::analysis::ReportRow) -> u64, cpe: bool| {
        rows.iter()
            .filter(|r| !cpe || r.path.ends_with(".cpe"))
            .map(f)
            .sum::<u64>()
    };
    (
        total(|r| r.params, false),
        total(|r| r.flops, false),
        total(|r| r.params, true),
        total(|r| r.flops, true),
    )
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol * target
}

#[test]
fn criterion_1_parameter_counts() {
    let table: [(&str, f64); 18] = [
        ("conv-xxs", 8.0),
        ("conv-xs", 15.0),
        ("conv-s", 39.0),
        ("trans-xxs", 4.0),
        ("trans-xs", 15.0),
        ("trans-s", 33.0),
        ("mlp-xxs", 9.0),
        ("mlp-xs", 17.0),
        ("mlp-s", 41.0),
        ("conv-ms-xxs", 5.0),
        ("conv-ms-xs", 17.0),
        ("conv-ms-s", 44.0),
        ("trans-ms-xxs", 2.0),
        ("trans-ms-xs", 14.0),
        ("trans-ms-s", 40.0),
        ("mlp-ms-xxs", 6.0),
        ("mlp-ms-xs", 19.0),
        ("mlp-ms-s", 46.0),
    ];
    let lines: Vec<(String, bool)> = table
        .iter()
        .map(|&(name, want)| {
            let p = analyze(&["--model", name]).0 as f64 / 1e6;
            (
                format!("{name}: {p:.3}M vs {want}M +/-10%"),
                within(p, want, 0.10),
            )
        })
        .collect();
    assert!(report(1, "parameter counts of the 18 presets", &lines));
}

#[test]
fn criterion_2_hybrid_counts() {
    let table = [
        ("hybrid-ms-xs", 28.0, 4.5),
        ("hybrid-ms-s", 63.0, 11.2),
        ("hybrid-ms-s+", 63.0, 12.3),
    ];
    let lines: Vec<(String, bool)> = table
        .iter()
        .map(|&(name, pw, fw)| {
            let (p, f, _, _) = analyze(&["--model", name]);
            let (p, f) = (p as f64 / 1e6, f as f64 / 1e9);
            (
                format!("{name}: {p:.3}M/{f:.3}G vs {pw}M +/-10%, {fw}G +/-15%"),
                within(p, pw, 0.10) && within(f, fw, 0.15),
            )
        })
        .collect();
    assert!(report(2, "hybrid parameter and FLOP counts", &lines));
}

#[test]
fn criterion_3_weight_sharing() {
    let (p, f, _, _) = analyze(&["--model", "mlp-s"]);
    let (ps, fs, _, _) = analyze(&["--model", "mlp-s", "--share-weights"]);
    let psm = ps as f64 / 1e6;
    let lines = vec![
        (format!("shared {ps} < unshared {p}"), ps < p),
        (
            format!("shared {psm:.3}M vs 39M +/-10%"),
            within(psm, 39.0, 0.10),
        ),
        (
            format!("flops {fs} vs {f} within 0.1%"),
            within(fs as f64, f as f64, 0.001),
        ),
    ];
    assert!(report(3, "weight sharing on MLP-S", &lines));
}

fn randomize(params: &NamedParams<f64>, rng: &mut Rng) {
    for (name, p) in params {
        let t = rng.randn::<f64>(p.shape()).unwrap().map(|v| 0.5 * v);
        let t = if name.ends_with("gamma") {
            t.map(|v| 1.0 + v)
        } else {
            t
        };
        p.set_value(t).unwrap();
    }
}

fn mixer(kind: SpatialKind, c: usize, h: usize, w: usize, rng: &mut Rng) -> SpatialMixer<f64> {
    let mut spec = MixingBlockSpec::new(kind, c, 2.0, h * w);
    spec.head_dim = 4;
    let m = SpatialMixer::new(&spec, rng).unwrap();
    let mut p = Vec::new();
    m.collect("m", &mut p);
    randomize(&p, rng);
    m
}

#[test]
fn criterion_4_receptive_field_and_dynamics() {
    let mut rng = Rng::seed(40);
    let mut lines = Vec::new();

    let (h, w) = (9, 9);
    let conv = mixer(SpatialKind::Conv, 4, h, w, &mut rng);
    let x = rng.randn::<f64>([1, 4, h, w]).unwrap();
    let inf = token_influence(&conv, &x).unwrap();
    let mut mask_ok = true;
    for p in 0..h * w {
        for q in 0..h * w {
            let d = (p / w).abs_diff(q / w).max((p % w).abs_diff(q % w));
            mask_ok &= if d > 1 {
                inf[p][q] == 0.0
            } else {
                inf[p][q] != 0.0
            };
        }
    }
    lines.push((
        "conv: influence nonzero exactly within Chebyshev radius 1".to_string(),
        mask_ok,
    ));

    let (h, w) = (3, 4);
    for kind in [SpatialKind::Attention, SpatialKind::Mlp] {
        let m = mixer(kind, 8, h, w, &mut rng);
        let x = rng.randn::<f64>([1, 8, h, w]).unwrap();
        let inf = token_influence(&m, &x).unwrap();
        let global = inf.iter().flatten().all(|&v| v != 0.0);
        lines.push((
            format!("{kind}: all {}x{} token influences nonzero", h * w, h * w),
            global,
        ));
    }

    let att = mixer(SpatialKind::Attention, 8, h, w, &mut rng);
    let x1 = rng.randn::<f64>([1, 8, h, w]).unwrap();
    let x2 = rng.randn::<f64>([1, 8, h, w]).unwrap();
    let a1 = att.attention_maps(&x1).unwrap().unwrap();
    let a2 = att.attention_maps(&x2).unwrap().unwrap();
    let diff = a1.max_abs_diff(&a2).unwrap();
    lines.push((
        format!("attention: maps change with input (max diff {diff:.3e} > 1e-3)"),
        diff > 1e-3,
    ));

    let mlp = mixer(SpatialKind::Mlp, 8, h, w, &mut rng);
    let j1 = token_mlp_jacobian(&mlp, &x1).unwrap().unwrap();
    let j2 = token_mlp_jacobian(&mlp, &x2).unwrap().unwrap();
    lines.push((
        "mlp: token matrix identical for two inputs".to_string(),
        j1 == j2,
    ));

    assert!(report(
        4,
        "receptive field and static/dynamic token weights",
        &lines
    ));
}

#[test]
fn criterion_5_gradcheck() {
    let out = spach(&["gradcheck"]);
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let mut lines: Vec<(String, bool)> = text
        .lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let err: f64 = f.get(1)?.parse().ok()?;
            Some((
                format!("{} max rel err {err:.3e}", f[0]),
                err < 1e-4 && f.get(2) == Some(&"ok"),
            ))
        })
        .collect();
    lines.push((
        format!(
            "{} checks, exit status {:?}",
            lines.len(),
            out.status.code()
        ),
        out.status.success(),
    ));
    assert!(report(
        5,
        "finite-difference gradient verification at f64",
        &lines
    ));
}

fn channel_mixer_as_conv(m: &ChannelMixer<f32>, x: &Tensor<f32>) -> Tensor<f32> {
    let as_conv = |w: &Tensor<f32>| {
        let (i, o) = (w.shape()[0], w.shape()[1]);
        kernels::permute(w, &[1, 0])
            .unwrap()
            .reshape([o, i, 1, 1])
            .unwrap()
    };
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let u = m.norm.forward_channels(&mut g, xv).unwrap();
    let w1 = g.constant(as_conv(&m.fc1.weight.value()));
    let b1 = g.constant(m.fc1.bias.as_ref().unwrap().value().as_ref().clone());
    let h = g.conv2d(u, w1, Some(b1), Conv2dSpec::default()).unwrap();
    let h = g.gelu(h);
    let w2 = g.constant(as_conv(&m.fc2.weight.value()));
    let b2 = g.constant(m.fc2.bias.as_ref().unwrap().value().as_ref().clone());
    let y = g.conv2d(h, w2, Some(b2), Conv2dSpec::default()).unwrap();
    g.value(y).clone()
}

fn sliding_window(x: &Tensor<f64>, w: &Tensor<f64>, pad: usize, groups: usize) -> Tensor<f64> {
    let (n, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (cout, cin_g, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let (oh, ow) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
    let cout_g = cout / groups;
    Tensor::from_fn([n, cout, oh, ow], |i| {
        let (b, co, oy, ox) = (
            i / (cout * oh * ow),
            (i / (oh * ow)) % cout,
            (i / ow) % oh,
            i % ow,
        );
        let g = co / cout_g;
        let mut s = 0.0;
        for ci in 0..cin_g {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy + ky) as isize - pad as isize;
                    let ix = (ox + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        s += w.at(&[co, ci, ky, kx])
                            * x.at(&[b, g * cin_g + ci, iy as usize, ix as usize]);
                    }
                }
            }
        }
        s
    })
    .unwrap()
}

fn layernorm_row(x: &[f64], gamma: &Tensor<f64>, beta: &Tensor<f64>) -> Vec<f64> {
    let c = x.len() as f64;
    let mean = x.iter().sum::<f64>() / c;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / (var + 1e-6).sqrt() * gamma.data()[j] + beta.data()[j])
        .collect()
}

/// `u W (+ b)` with `W` stored `[in, out]`.
fn project(u: &[f64], w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let (i, o) = (w.shape()[0], w.shape()[1]);
    (0..o)
        .map(|c| (0..i).map(|r| u[r] * w.at(&[r, c])).sum::<f64>() + b.map_or(0.0, |b| b.data()[c]))
        .collect()
}

fn two_token_attention_error(rng: &mut Rng) -> f64 {
    let c = 6;
    let mut spec = MixingBlockSpec::new(SpatialKind::Attention, c, 2.0, 2);
    spec.head_dim = c;
    let m = SpatialMixer::<f64>::new(&spec, rng).unwrap();
    let mut p = Vec::new();
    m.collect("m", &mut p);
    randomize(&p, rng);
    let cpe = m.cpe.as_ref().unwrap();
    cpe.weight
        .set_value(cpe.weight.value().zeros_like())
        .unwrap();
    let SpatialBody::Attention { q, k, v, o, heads } = &m.body else {
        unreachable!()
    };
    assert_eq!(*heads, 1);

    let x = rng.randn::<f64>([1, c, 1, 2]).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = m.forward(&mut g, xv).unwrap();
    let y = g.value(y).clone();

    let (gamma, beta) = (m.norm.gamma.value(), m.norm.beta.value());
    let u: Vec<Vec<f64>> = (0..2)
        .map(|t| {
            layernorm_row(
                &(0..c).map(|ch| x.at(&[0, ch, 0, t])).collect::<Vec<_>>(),
                &gamma,
                &beta,
            )
        })
        .collect();
    let qs: Vec<_> = u
        .iter()
        .map(|r| project(r, &q.weight.value(), None))
        .collect();
    let ks: Vec<_> = u
        .iter()
        .map(|r| project(r, &k.weight.value(), None))
        .collect();
    let vs: Vec<_> = u
        .iter()
        .map(|r| project(r, &v.weight.value(), None))
        .collect();
    let dot =
        |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (c as f64).sqrt();
    let mut err = 0.0f64;
    for t in 0..2 {
        // softmax over two scores reduces to a logistic weight on the first token
        let a0 = 1.0 / (1.0 + (dot(&qs[t], &ks[1]) - dot(&qs[t], &ks[0])).exp());
        let mixed: Vec<f64> = (0..c)
            .map(|j| a0 * vs[0][j] + (1.0 - a0) * vs[1][j])
            .collect();
        let out = project(
            &mixed,
            &o.weight.value(),
            o.bias.as_ref().map(|b| b.value()).as_deref(),
        );
        for ch in 0..c {
            err = err.max((y.at(&[0, ch, 0, t]) - (x.at(&[0, ch, 0, t]) + out[ch])).abs());
        }
    }
    err
}

#[test]
fn criterion_6_oracle_equivalences() {
    let mut rng = Rng::seed(60);
    let mut lines = Vec::new();

    let spec = MixingBlockSpec::new(SpatialKind::Conv, 12, 4.0, 20);
    let m = ChannelMixer::<f32>::new(&spec, &mut rng).unwrap();
    let x = rng.randn::<f32>([2, 12, 4, 5]).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mlp = m.branch(&mut g, xv).unwrap();
    let mlp = g.value(mlp).clone();
    let conv = channel_mixer_as_conv(&m, &x);
    lines.push((
        "channel MLP equals 1x1 conv bit for bit (f32)".to_string(),
        mlp.data() == conv.data(),
    ));

    let x = rng.randn::<f64>([2, 6, 7, 7]).unwrap();
    for (groups, cin_g, cout) in [(6, 1, 6), (3, 2, 6), (2, 3, 4)] {
        let w = rng.randn::<f64>([cout, cin_g, 3, 3]).unwrap();
        let got = kernels::conv2d(&x, &w, None, Conv2dSpec::new(1, 1, groups)).unwrap();
        let diff = got
            .max_abs_diff(&sliding_window(&x, &w, 1, groups))
            .unwrap();
        lines.push((
            format!("conv groups={groups} vs sliding window: {diff:.2e} < 1e-6"),
            diff < 1e-6,
        ));
    }

    let err = (0..4)
        .map(|_| two_token_attention_error(&mut rng))
        .fold(0.0, f64::max);
    lines.push((
        format!("two-token attention vs closed form: {err:.2e} < 1e-10"),
        err < 1e-10,
    ));

    assert!(report(6, "oracle equivalences", &lines));
}

fn train_run(model: &str, data: &Path, out: &Path, epochs: usize) -> RunLog {
    let epochs = epochs.to_string();
    let o = spach(&[
        "train",
        "--model",
        model,
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        &epochs,
        "--warmup-epochs",
        "5",
        "--batch",
        "32",
        "--mixup",
        "0",
        "--label-smoothing",
        "0",
        "--seed",
        "7",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(
        o.status.success(),
        "train {model}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    RunLog::parse(&std::fs::read_to_string(out.join("run.log")).unwrap()).unwrap()
}

#[test]
fn criterion_7_desk_memorization() {
    const EPOCHS: usize = 100;
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.spd");
    let o = spach(&[
        "make-data",
        "--n",
        "128",
        "--seed",
        "3",
        "--output",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success());

    let lines: Vec<(String, bool)> = std::thread::scope(|s| {
        let handles: Vec<_> = ["desk-conv", "desk-trans", "desk-mlp", "desk-hybrid"]
            .into_iter()
            .map(|name| {
                let (data, dir) = (&data, dir.path());
                s.spawn(move || {
                    let a = train_run(name, data, &dir.join(format!("{name}-a")), EPOCHS);
                    let b = train_run(name, data, &dir.join(format!("{name}-b")), EPOCHS);
                    let top1 = a.records.iter().map(|r| r.eval_top1).fold(0.0, f64::max);
                    let first = a.records.iter().find(|r| r.eval_top1 >= 0.99).map(|r| r.epoch);
                    let same = a == b;
                    (
                        format!("{name}: best train top-1 {:.1}% (first >=99% at epoch {first:?}), rerun identical: {same}",
                            100.0 * top1),
                        first.is_some() && same,
                    )
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(report(7, "desk-scale memorization of 128 samples", &lines));
}

#[test]
fn criterion_8_cpe_overhead() {
    let names = [
        "trans-xxs",
        "trans-xs",
        "trans-s",
        "mlp-xxs",
        "mlp-xs",
        "mlp-s",
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
    ];
    let lines: Vec<(String, bool)> = names
        .iter()
        .map(|name| {
            let (p, f, cp, cf) = analyze(&["--model", name]);
            let (rp, rf) = (cp as f64 / p as f64, cf as f64 / f as f64);
            (
                format!(
                    "{name}: cpe {:.3}% params, {:.3}% flops",
                    100.0 * rp,
                    100.0 * rf
                ),
                cp > 0 && rp < 0.01 && rf < 0.01,
            )
        })
        .collect();
    assert!(report(8, "CPE overhead below 1%", &lines));
}
