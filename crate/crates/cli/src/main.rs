//! `spach` command-line tool: analysis, training, evaluation and verification.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use spach::analysis::{analyze, ReportFormat};
use spach::assembly::{parse_resolution, preset_by_name, Model, ModelConfig};
use spach::gradcheck::{run_checks, GRADCHECK_TOLERANCE};
use spach::harness::{evaluate, train, Dataset, TrainConfig};
use spach::SpachError;
use spach_tensor::Rng;

const EXIT_VERIFY: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "spach", version, about = "Spatial/channel mixing backbones")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print parameter and FLOP counts per module.
    Analyze(AnalyzeArgs),
    /// Train a model on an SPD1 dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on an SPD1 dataset.
    Eval(EvalArgs),
    /// Finite-difference gradient checks at f64.
    Gradcheck(GradcheckArgs),
    /// Write a preset as an editable config file.
    ExportConfig(ExportArgs),
    /// Write a deterministic synthetic dataset.
    MakeData(MakeDataArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Preset name (e.g. conv-ms-xxs, trans-s, hybrid-ms-s+) or config file path.
    #[arg(long)]
    model: String,
    /// Use one spatial mixer per sharing scope.
    #[arg(long)]
    share_weights: bool,
    /// Config override `key=value`, applied after the preset or file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        let path = Path::new(&self.model);
        let base = if path.is_file() {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ModelConfig::from_text(&text)?
        } else {
            preset_by_name(&self.model)?
        };
        let mut overrides = self.overrides.clone();
        if self.share_weights {
            overrides.push("weight_sharing=true".into());
        }
        Ok(base.with_overrides(&overrides)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Table,
    Machine,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Input resolution `HxW`; defaults to the model's configured resolution.
    #[arg(long)]
    resolution: Option<String>,
    #[arg(long, value_enum, default_value = "table")]
    format: FormatArg,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    /// Held-out split for per-epoch accuracy; the training data is used when absent.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 20)]
    warmup_epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    /// Base learning rate; defaults to 0.005 * batch / 512.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.8)]
    mixup: f64,
    #[arg(long, default_value_t = 0.1)]
    label_smoothing: f64,
    /// Maximum stochastic-depth rate; defaults to the model config.
    #[arg(long)]
    drop_path: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for run.log, model.spt and config.txt.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 128)]
    batch: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `all` or a comma-separated list of check names.
    #[arg(long, default_value = "all")]
    ops: String,
    /// Skew the analytic gradient of one check (negative control).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Destination file; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct MakeDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value = "32x32")]
    resolution: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

/// Failure that maps to a specific exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(Exit(code, _)) = err.downcast_ref::<Exit>() {
        return *code;
    }
    match err.downcast_ref::<SpachError>() {
        Some(SpachError::NonFinite(_)) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("SPACH_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .with_context(|| format!("SPACH_THREADS={v} is not a count"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let cfg = args.model.config()?;
    let resolution = match &args.resolution {
        Some(r) => parse_resolution(r)?,
        None => cfg.input_resolution,
    };
    let model = Model::<f32>::build(&cfg, &mut Rng::seed(0))?;
    let report = analyze(&model, resolution)?;
    let format = match args.format {
        FormatArg::Table => ReportFormat::Table,
        FormatArg::Machine => ReportFormat::Machine,
    };
    print!("{}", report.emit(format));
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.model.config()?;
    let data =
        Dataset::load(&args.data).with_context(|| format!("loading {}", args.data.display()))?;
    let eval_data = match &args.eval_data {
        Some(p) => Some(Dataset::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let tc = TrainConfig {
        epochs: args.epochs,
        warmup_epochs: args.warmup_epochs,
        batch: args.batch,
        lr: args.lr,
        weight_decay: args.weight_decay,
        mixup_alpha: args.mixup,
        label_smoothing: args.label_smoothing,
        seed: args.seed,
        drop_path_max: args.drop_path,
    };
    tc.validate()?;
    let mut model = Model::<f32>::build(&cfg, &mut Rng::seed(args.seed))?;
    fs::create_dir_all(&args.output)?;
    fs::write(args.output.join("config.txt"), model.config().to_text())?;
    let mut log = fs::File::create(args.output.join("run.log"))?;
    let mut write_err = None;
    let result = train(&mut model, &data, eval_data.as_ref(), &tc, |r| {
        if let Err(e) = writeln!(log, "{}", r.to_line()) {
            write_err.get_or_insert(e);
        }
        eprintln!(
            "epoch {} loss {:.4} top1 {:.4} lr {:.3e}",
            r.epoch, r.train_loss, r.eval_top1, r.lr
        );
    });
    // The model holds the last good parameters whether or not training finished.
    fs::write(args.output.join("config.txt"), model.config().to_text())?;
    model.save(args.output.join("model.spt"))?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    result?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.model.config()?;
    let model = Model::<f32>::build(&cfg, &mut Rng::seed(0))?;
    model
        .load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let data =
        Dataset::load(&args.data).with_context(|| format!("loading {}", args.data.display()))?;
    let r = evaluate(&model, &data, args.batch.max(1))?;
    println!("top1\t{}\nloss\t{}", r.top1, r.loss);
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let names: Vec<&str> = if args.ops == "all" {
        Vec::new()
    } else {
        args.ops.split(',').map(str::trim).collect()
    };
    let results = run_checks(&names, args.seed, args.corrupt.as_deref())?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<width$}  {:.3e}  {status}", r.name, r.max_rel_err);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if !failed.is_empty() {
        return Err(Exit(
            EXIT_VERIFY,
            format!(
                "gradient check above {GRADCHECK_TOLERANCE:e}: {}",
                failed.join(", ")
            ),
        )
        .into());
    }
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    let text = args.model.config()?.to_text();
    match &args.output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_make_data(args: &MakeDataArgs) -> Result<()> {
    if args.n == 0 {
        bail!(Exit(EXIT_USAGE, "--n must be at least 1".into()));
    }
    let resolution = parse_resolution(&args.resolution)?;
    let data = Dataset::synthetic(args.n, args.classes, resolution, args.seed)?;
    data.save(&args.output)
        .with_context(|| format!("writing {}", args.output.display()))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ExportConfig(a) => cmd_export(a),
        Command::MakeData(a) => cmd_make_data(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
