use std::sync::Arc;

use spach_tensor::{Element, Graph, Parameter, Rng, Target, Tensor};

use super::augment::{mixup, smooth_labels};
use super::data::Dataset;
use super::log::{EpochRecord, RunLog};
use super::optim::{AdamW, AdamWConfig, DecayPolicy, ADAM_BETAS, ADAM_EPS};
use super::schedule::{scaled_base_lr, LrSchedule};
use crate::assembly::Model;
use crate::error::{config_err, Result, SpachError};
use crate::nn::Ctx;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch: usize,
    /// Replaces the `0.005 * batch / 512` base learning rate when set.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub mixup_alpha: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Replaces the model's stochastic-depth maximum when set.
    pub drop_path_max: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            warmup_epochs: 20,
            batch: 128,
            lr: None,
            weight_decay: 0.05,
            mixup_alpha: 0.8,
            label_smoothing: 0.1,
            seed: 0,
            drop_path_max: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(config_err("batch must be at least 1"));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(config_err("warmup_epochs must be smaller than epochs"));
        }
        if self.lr.is_some_and(|lr| !(lr >= 0.0 && lr.is_finite())) {
            return Err(config_err("lr must be a finite non-negative number"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(config_err("label_smoothing must lie in [0, 1)"));
        }
        if self.drop_path_max.is_some_and(|d| !(0.0..1.0).contains(&d)) {
            return Err(config_err("drop_path_max must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn base_lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| scaled_base_lr(self.batch))
    }

    pub fn schedule(&self, samples: usize) -> LrSchedule {
        let per_epoch = samples.div_ceil(self.batch) as u64;
        LrSchedule {
            base_lr: self.base_lr(),
            warmup_steps: self.warmup_epochs as u64 * per_epoch,
            total_steps: self.epochs as u64 * per_epoch,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub top1: f64,
    pub loss: f64,
}

fn check_dataset<T: Element>(model: &Model<T>, data: &Dataset) -> Result<()> {
    model.check_input_resolution(data.resolution())?;
    if data.classes() > model.config().num_classes {
        return Err(config_err(format!(
            "dataset has {} classes, model predicts {}",
            data.classes(),
            model.config().num_classes
        )));
    }
    Ok(())
}

fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode top-1 accuracy and mean cross-entropy over `data`.
pub fn evaluate<T: Element>(model: &Model<T>, data: &Dataset, batch: usize) -> Result<EvalResult> {
    check_dataset(model, data)?;
    let classes = model.config().num_classes;
    let (mut correct, mut loss_sum) = (0usize, 0.0);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let (images, labels) = data.batch::<T>(chunk)?;
        let mut g = Graph::new();
        let x = g.constant(images);
        let logits = model.forward(&mut g, x, &mut Ctx::eval())?;
        for (row, &label) in g.value(logits).data().chunks(classes).zip(&labels) {
            correct += usize::from(argmax(row) == label);
        }
        let loss = g.cross_entropy(logits, Target::Classes(labels))?;
        loss_sum += g.value(loss).item()?.as_f64() * chunk.len() as f64;
    }
    Ok(EvalResult {
        top1: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
    })
}

type Snapshot<T> = Vec<(Parameter<T>, Arc<Tensor<T>>)>;

fn snapshot<T: Element>(params: &[Parameter<T>]) -> Snapshot<T> {
    params.iter().map(|p| (p.clone(), p.value())).collect()
}

fn restore<T: Element>(snap: &Snapshot<T>) -> Result<()> {
    for (p, v) in snap {
        p.set_value((**v).clone())?;
    }
    Ok(())
}

/// Trains `model` on `train`, evaluating on `eval` (or `train` when absent) after every epoch.
///
/// Deterministic for a fixed seed. `on_epoch` sees each record as soon as it is
/// produced. On a non-finite loss or gradient the parameters are rolled back to
/// the last values that produced a finite loss and `SpachError::NonFinite` is returned.
pub fn train<T: Element>(
    model: &mut Model<T>,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunLog> {
    cfg.validate()?;
    check_dataset(model, train)?;
    let eval = eval.unwrap_or(train);
    check_dataset(model, eval)?;
    if let Some(d) = cfg.drop_path_max {
        model.set_drop_path_max(d)?;
    }
    let classes = model.config().num_classes;
    let named = model.named_parameters();
    let params: Vec<Parameter<T>> = named.iter().map(|(_, p)| p.clone()).collect();
    let mut opt = AdamW::new(
        named,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            betas: ADAM_BETAS,
            eps: ADAM_EPS,
            decay_policy: DecayPolicy::MatricesOnly,
        },
    );
    let schedule = cfg.schedule(train.len());
    let mut root = Rng::seed(cfg.seed);
    let mut shuffle_rng = root.fork();
    let mut mix_rng = root.fork();
    let mut drop_rng = root.fork();
    let plain_targets = cfg.label_smoothing == 0.0 && cfg.mixup_alpha <= 0.0;

    let mut log = RunLog::default();
    let mut last_good = snapshot(&params);
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let current = snapshot(&params);
            let (images, labels) = train.batch::<T>(chunk)?;
            let (images, target) = if plain_targets {
                (images, Target::Classes(labels))
            } else {
                let soft = smooth_labels::<T>(&labels, classes, cfg.label_smoothing)?;
                let (mixed, soft, _) = mixup(&images, &soft, cfg.mixup_alpha, &mut mix_rng);
                (mixed, Target::Probabilities(soft))
            };
            let step_ctx = StepCtx {
                step,
                epoch,
                last_good: &last_good,
            };
            let (l, r) = train_step(
                model,
                images,
                target,
                &mut drop_rng,
                &params,
                &mut opt,
                &schedule,
                step_ctx,
            )?;
            loss_sum += l * chunk.len() as f64;
            lr = r;
            last_good = current;
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            eval_top1: evaluate(model, eval, cfg.batch)?.top1,
            lr,
        };
        on_epoch(&record);
        log.records.push(record);
    }
    Ok(log)
}

struct StepCtx<'a, T> {
    step: u64,
    epoch: usize,
    last_good: &'a Snapshot<T>,
}

/// One forward/backward/update; returns `(loss, lr)`.
#[allow(clippy::too_many_arguments)]
fn train_step<T: Element>(
    model: &Model<T>,
    images: Tensor<T>,
    target: Target<T>,
    drop_rng: &mut Rng,
    params: &[Parameter<T>],
    opt: &mut AdamW<T>,
    schedule: &LrSchedule,
    ctx: StepCtx<'_, T>,
) -> Result<(f64, f64)> {
    let StepCtx {
        step,
        epoch,
        last_good,
    } = ctx;
    for p in params {
        p.zero_grad();
    }
    let mut g = Graph::new();
    let x = g.constant(images);
    let mut ctx = Ctx::train(drop_rng.fork());
    let logits = model.forward(&mut g, x, &mut ctx)?;
    let loss = g.cross_entropy(logits, target)?;
    let value = g.value(loss).item()?.as_f64();
    if !value.is_finite() {
        restore(last_good)?;
        return Err(SpachError::NonFinite(format!(
            "loss {value} at epoch {epoch}, step {step}"
        )));
    }
    g.backward(loss)?;
    let lr = schedule.lr_at(step);
    if let Err(e) = opt.step(lr) {
        restore(last_good)?;
        return Err(e);
    }
    Ok((value, lr))
}
