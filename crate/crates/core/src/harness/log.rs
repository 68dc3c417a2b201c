use std::fmt::Write;

use crate::error::{Result, SpachError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub train_loss: f64,
    /// Top-1 accuracy in `[0, 1]` on the evaluation split after the epoch.
    pub eval_top1: f64,
    /// Learning rate of the epoch's last optimizer step.
    pub lr: f64,
}

impl EpochRecord {
    /// One `epoch<TAB>train_loss<TAB>eval_top1<TAB>lr` line without newline.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.epoch, self.train_loss, self.eval_top1, self.lr
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = || SpachError::Format(format!("malformed run log line '{line}'"));
        let fields: Vec<&str> = line.split('\t').collect();
        let [epoch, loss, top1, lr] = fields[..] else {
            return Err(bad());
        };
        Ok(EpochRecord {
            epoch: epoch.parse().map_err(|_| bad())?,
            train_loss: loss.parse().map_err(|_| bad())?,
            eval_top1: top1.parse().map_err(|_| bad())?,
            lr: lr.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn emit(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{}", r.to_line());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(EpochRecord::parse_line)
            .collect::<Result<Vec<_>>>()?;
        if records.windows(2).any(|w| w[1].epoch <= w[0].epoch) {
            return Err(SpachError::Format(
                "run log epochs are not increasing".into(),
            ));
        }
        Ok(RunLog { records })
    }
}
