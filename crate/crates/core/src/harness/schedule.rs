use std::f64::consts::PI;

/// Reference batch size of the linear learning-rate scaling rule.
pub const LR_REFERENCE_BATCH: f64 = 512.0;
pub const LR_PER_REFERENCE_BATCH: f64 = 0.005;

/// `0.005 * batch / 512`.
pub fn scaled_base_lr(batch: usize) -> f64 {
    LR_PER_REFERENCE_BATCH * batch as f64 / LR_REFERENCE_BATCH
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0, indexed by optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let decay_steps = self.total_steps.saturating_sub(self.warmup_steps);
        if decay_steps == 0 {
            return 0.0;
        }
        let progress = ((step - self.warmup_steps) as f64 / decay_steps as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}
