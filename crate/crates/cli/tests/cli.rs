//! End-to-end behavior of the `spach` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use spach::assembly::{preset_by_name, Model};
use spach::harness::RunLog;
use spach_tensor::Rng;

fn spach(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spach"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn make_data(path: &Path, n: &str, resolution: &str, seed: &str) -> Output {
    spach(&[
        "make-data",
        "--n",
        n,
        "--resolution",
        resolution,
        "--seed",
        seed,
        "--output",
        p(path),
    ])
}

fn train(model: &str, data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--model",
        model,
        "--data",
        p(data),
        "--batch",
        "16",
        "--warmup-epochs",
        "1",
        "--output",
        p(out),
    ];
    args.extend_from_slice(extra);
    spach(&args)
}

#[test]
fn unknown_preset_is_a_usage_error() {
    let o = spach(&["analyze", "--model", "nosuch"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
    assert!(!o.stderr.is_empty());
}

#[test]
fn bad_flags_and_resolutions_are_usage_errors() {
    assert_eq!(spach(&["analyze"]).status.code(), Some(2));
    let o = spach(&["analyze", "--model", "conv-xxs", "--resolution", "224x0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = spach(&["analyze", "--model", "mlp-xxs", "--resolution", "256x256"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exported_config_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("model.cfg");
    let o = spach(&[
        "export-config",
        "--model",
        "hybrid-ms-xs",
        "--output",
        p(&cfg),
    ]);
    assert!(o.status.success());
    let direct = spach(&["analyze", "--model", "hybrid-ms-xs", "--format", "machine"]);
    let from_file = spach(&["analyze", "--model", p(&cfg), "--format", "machine"]);
    assert!(direct.status.success() && from_file.status.success());
    assert_eq!(stdout(&direct), stdout(&from_file));

    let printed = spach(&["export-config", "--model", "hybrid-ms-xs"]);
    assert_eq!(stdout(&printed), fs::read_to_string(&cfg).unwrap());
}

#[test]
fn config_file_with_unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("model.cfg");
    let text = stdout(&spach(&["export-config", "--model", "conv-xxs"]));
    fs::write(&cfg, format!("{text}colour = blue\n")).unwrap();
    let o = spach(&["analyze", "--model", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let o = spach(&["analyze", "--model", "conv-xxs", "--set", "colour=blue"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn weight_sharing_flag_shrinks_the_model() {
    let total = |args: &[&str]| {
        let mut full = vec!["analyze", "--format", "machine"];
        full.extend_from_slice(args);
        let out = stdout(&spach(&full));
        let line = out.lines().last().unwrap().to_string();
        let f: Vec<u64> = line
            .split('\t')
            .skip(1)
            .map(|v| v.parse().unwrap())
            .collect();
        (f[0], f[1])
    };
    let (p, f) = total(&["--model", "mlp-s"]);
    let (ps, fs) = total(&["--model", "mlp-s", "--share-weights"]);
    assert!(ps < p);
    assert_eq!(fs, f);
}

#[test]
fn make_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    assert!(make_data(&a, "20", "16x16", "4").status.success());
    assert!(make_data(&b, "20", "16x16", "4").status.success());
    assert!(make_data(&c, "20", "16x16", "5").status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(
        make_data(&dir.path().join("d"), "0", "16x16", "4")
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn zero_epochs_saves_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(make_data(&data, "8", "32x32", "0").status.success());
    let out = dir.path().join("run");
    let o = train("desk-conv", &data, &out, &["--epochs", "0", "--seed", "9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("run.log")).unwrap(), "");

    let fresh =
        Model::<f32>::build(&preset_by_name("desk-conv").unwrap(), &mut Rng::seed(9)).unwrap();
    let path = dir.path().join("fresh.spt");
    fresh.save(&path).unwrap();
    assert_eq!(
        fs::read(&path).unwrap(),
        fs::read(out.join("model.spt")).unwrap()
    );
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(make_data(&data, "32", "32x32", "1").status.success());
    let out = dir.path().join("run");
    let o = train("desk-trans", &data, &out, &["--epochs", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = RunLog::parse(&fs::read_to_string(out.join("run.log")).unwrap()).unwrap();
    assert_eq!(
        log.records.iter().map(|r| r.epoch).collect::<Vec<_>>(),
        [1, 2, 3]
    );

    let cfg = out.join("config.txt");
    let o = spach(&[
        "eval",
        "--model",
        p(&cfg),
        "--checkpoint",
        p(&out.join("model.spt")),
        "--data",
        p(&data),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let top1: f64 = text
        .lines()
        .next()
        .unwrap()
        .split('\t')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(top1, log.records[2].eval_top1);

    let o = spach(&[
        "eval",
        "--model",
        "desk-mlp",
        "--checkpoint",
        p(&out.join("model.spt")),
        "--data",
        p(&data),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn wrong_resolution_data_is_rejected_for_token_mlp() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(make_data(&data, "8", "16x16", "0").status.success());
    let o = train(
        "desk-mlp",
        &data,
        &dir.path().join("run"),
        &["--epochs", "1"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3_and_keeps_a_finite_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(make_data(&data, "16", "32x32", "2").status.success());
    let out = dir.path().join("run");
    let o = train("desk-conv", &data, &out, &["--epochs", "4", "--lr", "1e30"]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );

    let model =
        Model::<f32>::build(&preset_by_name("desk-conv").unwrap(), &mut Rng::seed(0)).unwrap();
    model.load(out.join("model.spt")).unwrap();
    assert!(model
        .named_parameters()
        .iter()
        .all(|(_, p)| p.value().is_finite()));
}

#[test]
fn gradcheck_modes_and_exit_codes() {
    let o = spach(&["gradcheck", "--ops", "gelu"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("gelu") && text.trim_end().ends_with("ok"));

    assert_eq!(
        spach(&["gradcheck", "--ops", "nosuch"]).status.code(),
        Some(2)
    );

    let o = spach(&["gradcheck", "--ops", "gelu,softmax", "--corrupt", "softmax"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("softmax"));
    assert!(stdout(&o)
        .lines()
        .any(|l| l.starts_with("softmax") && l.ends_with("FAIL")));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(make_data(&data, "16", "32x32", "3").status.success());
    let run = |threads: &str, name: &str| {
        let out = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_spach"))
            .env("SPACH_THREADS", threads)
            .args([
                "train",
                "--model",
                "desk-hybrid",
                "--data",
                p(&data),
                "--epochs",
                "1",
                "--batch",
                "8",
            ])
            .args(["--warmup-epochs", "0", "--output", p(&out)])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out.join("model.spt")).unwrap()
    };
    assert_eq!(run("1", "one"), run("4", "four"));
    let o = Command::new(env!("CARGO_BIN_EXE_spach"))
        .env("SPACH_THREADS", "many")
        .args(["gradcheck", "--ops", "sum"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
