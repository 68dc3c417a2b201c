use std::fmt::Write;

use crate::error::{Result, SpachError};

pub const COUNTING_CONVENTION: &str = "1 MAC = 1 FLOP";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportRow {
    pub path: String,
    pub params: u64,
    pub flops: u64,
}

impl ReportRow {
    pub fn new(path: impl Into<String>, params: u64, flops: u64) -> Self {
        ReportRow {
            path: path.into(),
            params,
            flops,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Machine,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnalysisReport {
    pub rows: Vec<ReportRow>,
    pub input_resolution: (usize, usize),
}

impl AnalysisReport {
    pub fn new(rows: Vec<ReportRow>, input_resolution: (usize, usize)) -> Self {
        AnalysisReport {
            rows,
            input_resolution,
        }
    }

    pub fn counting_convention(&self) -> &'static str {
        COUNTING_CONVENTION
    }

    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    /// `(params, flops)` summed over rows whose path ends with `.{suffix}`.
    pub fn totals_for(&self, suffix: &str) -> (u64, u64) {
        let tail = format!(".{suffix}");
        self.rows
            .iter()
            .filter(|r| r.path.ends_with(&tail))
            .fold((0, 0), |(p, f), r| (p + r.params, f + r.flops))
    }

    pub fn emit(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Machine => self.emit_machine(),
            ReportFormat::Table => self.emit_table(),
        }
    }

    fn emit_machine(&self) -> String {
        let mut out = String::from("path\tparams\tflops\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}", r.path, r.params, r.flops);
        }
        let _ = writeln!(
            out,
            "TOTAL\t{}\t{}",
            self.total_params(),
            self.total_flops()
        );
        out
    }

    fn emit_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.path.len())
            .chain(["module".len(), "TOTAL".len()])
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        let (h, w) = self.input_resolution;
        let _ = writeln!(out, "input {h}x{w}, {COUNTING_CONVENTION}");
        let _ = writeln!(
            out,
            "{:<width$}  {:>14}  {:>16}",
            "module", "params", "flops"
        );
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>14}  {:>16}", r.path, r.params, r.flops);
        }
        let (p, f) = (self.total_params(), self.total_flops());
        let _ = writeln!(out, "{:<width$}  {:>14}  {:>16}", "TOTAL", p, f);
        let _ = writeln!(
            out,
            "{:<width$}  {:>13.2}M  {:>15.2}G",
            "",
            p as f64 / 1e6,
            f as f64 / 1e9
        );
        out
    }
}

/// Parses the machine format back into rows, checking the TOTAL line.
pub fn parse_machine(text: &str) -> Result<Vec<ReportRow>> {
    let bad = |msg: String| SpachError::Format(msg);
    let mut lines = text.lines();
    if lines.next() != Some("path\tparams\tflops") {
        return Err(bad("missing report header".into()));
    }
    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        let [path, params, flops] = fields[..] else {
            return Err(bad(format!("malformed report line '{line}'")));
        };
        let params: u64 = params
            .parse()
            .map_err(|_| bad(format!("bad params in '{line}'")))?;
        let flops: u64 = flops
            .parse()
            .map_err(|_| bad(format!("bad flops in '{line}'")))?;
        if path == "TOTAL" {
            let p: u64 = rows.iter().map(|r: &ReportRow| r.params).sum();
            let f: u64 = rows.iter().map(|r: &ReportRow| r.flops).sum();
            if (p, f) != (params, flops) {
                return Err(bad("TOTAL line disagrees with rows".into()));
            }
            return Ok(rows);
        }
        rows.push(ReportRow::new(path, params, flops));
    }
    Err(bad("missing TOTAL line".into()))
}
