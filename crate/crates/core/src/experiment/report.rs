//! Report assembly, rendering and comparison against reference tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArmKind, ExperimentConfig};
use crate::metrics::rmse_vs_oracle;
use crate::pid::PIDResult;
use crate::{Error, Result};

pub const AUROC_COLUMNS: [&str; 3] = ["X1", "X2", "X1+X2"];
pub const PID_COLUMNS: [&str; 4] = ["Unique 1", "Unique 2", "Shared", "Complementary"];

fn auroc_column(modality: &str) -> &'static str {
    match modality {
        "x1" => "X1",
        "x2" => "X2",
        _ => "X1+X2",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub block: String,
    pub arm: ArmKind,
    pub seed: u64,
    pub modality: String,
    pub auroc: f64,
    pub brier: f64,
    pub n_effective: f64,
    /// `None` when the test set had fewer than two usable batches.
    #[serde(serialize_with = "nan_as_none", deserialize_with = "none_as_nan")]
    pub batch_sd: f64,
}

fn nan_as_none<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_some(v)
    } else {
        s.serialize_none()
    }
}

fn none_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PidRow {
    pub block: String,
    pub arm: ArmKind,
    pub seed: u64,
    pub unique1: f64,
    pub unique2: f64,
    pub shared: f64,
    pub complementary: f64,
    pub total_mi: f64,
    pub residual: f64,
    pub solver: String,
    pub iterations: usize,
    pub sk_rounds: usize,
    pub sk_converged: bool,
    pub marginal_error: f64,
    pub objective_value: f64,
    pub converged: bool,
}

impl PidRow {
    pub fn new(block: &str, arm: ArmKind, seed: u64, r: PIDResult) -> Self {
        Self {
            block: block.to_string(),
            arm,
            seed,
            unique1: r.unique1,
            unique2: r.unique2,
            shared: r.shared,
            complementary: r.complementary,
            total_mi: r.total_mi,
            residual: r.residual,
            solver: r.diagnostics.solver,
            iterations: r.diagnostics.iterations,
            sk_rounds: r.diagnostics.sk_rounds,
            sk_converged: r.diagnostics.sk_converged,
            marginal_error: r.diagnostics.marginal_error,
            objective_value: r.diagnostics.objective_value,
            converged: r.diagnostics.converged,
        }
    }

    pub fn components(&self) -> [f64; 4] {
        [self.unique1, self.unique2, self.shared, self.complementary]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub block: String,
    pub seed: u64,
    pub arm: Option<ArmKind>,
    pub stage: String,
    pub message: String,
    pub numerical: bool,
}

/// Seed-averaged value of one table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub block: String,
    pub arm: ArmKind,
    pub column: String,
    pub mean: f64,
    /// Standard deviation across seeds.
    pub seed_sd: Option<f64>,
    /// Mean across seeds of the within-test-set batch standard deviation (AUROC columns).
    pub batch_sd: Option<f64>,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub arm: ArmKind,
    /// `auroc` or `pid`.
    pub quantity: String,
    pub rmse: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub version: String,
    pub config_hash: String,
    pub complete: bool,
    pub config: ExperimentConfig,
    pub metrics: Vec<MetricRow>,
    pub pid: Vec<PidRow>,
    pub summary: Vec<SummaryCell>,
    pub rmse: Vec<RmseRow>,
    pub failures: Vec<Failure>,
}

fn mean_sd(v: &[f64]) -> (f64, Option<f64>) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, None);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, Some(var.sqrt()))
}

/// Seed-averaged cells in config order (block, arm, column).
pub fn summarize(cfg: &ExperimentConfig, metrics: &[MetricRow], pid: &[PidRow]) -> Vec<SummaryCell> {
    let mut out = Vec::new();
    for block in cfg.blocks.iter().map(|b| b.label()) {
        for &arm in &cfg.arms {
            for col in AUROC_COLUMNS {
                let rows: Vec<&MetricRow> = metrics
                    .iter()
                    .filter(|r| r.block == block && r.arm == arm && auroc_column(&r.modality) == col)
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                let (mean, seed_sd) = mean_sd(&rows.iter().map(|r| r.auroc).collect::<Vec<_>>());
                let sds: Vec<f64> = rows.iter().map(|r| r.batch_sd).filter(|s| s.is_finite()).collect();
                let batch_sd = (!sds.is_empty()).then(|| sds.iter().sum::<f64>() / sds.len() as f64);
                out.push(SummaryCell { block: block.clone(), arm, column: col.into(), mean, seed_sd, batch_sd, seeds: rows.len() });
            }
            let rows: Vec<&PidRow> = pid.iter().filter(|r| r.block == block && r.arm == arm).collect();
            if rows.is_empty() {
                continue;
            }
            for (k, col) in PID_COLUMNS.iter().chain(["Total"].iter()).enumerate() {
                let vals: Vec<f64> =
                    rows.iter().map(|r| if k < 4 { r.components()[k] } else { r.total_mi }).collect();
                let (mean, seed_sd) = mean_sd(&vals);
                out.push(SummaryCell {
                    block: block.clone(),
                    arm,
                    column: (*col).into(),
                    mean,
                    seed_sd,
                    batch_sd: None,
                    seeds: rows.len(),
                });
            }
        }
    }
    out
}

/// RMSE of each non-oracle arm against the oracle arm, pairing points by
/// (block, seed, modality) for AUROC and (block, seed, component) for PID.
fn rmse_rows(cfg: &ExperimentConfig, metrics: &[MetricRow], pid: &[PidRow]) -> Vec<RmseRow> {
    let mut out = Vec::new();
    if !cfg.arms.contains(&ArmKind::Oracle) {
        return out;
    }
    let oracle_auroc: BTreeMap<(&str, u64, &str), f64> = metrics
        .iter()
        .filter(|r| r.arm == ArmKind::Oracle)
        .map(|r| ((r.block.as_str(), r.seed, r.modality.as_str()), r.auroc))
        .collect();
    let oracle_pid: BTreeMap<(&str, u64), [f64; 4]> =
        pid.iter().filter(|r| r.arm == ArmKind::Oracle).map(|r| ((r.block.as_str(), r.seed), r.components())).collect();
    for &arm in cfg.arms.iter().filter(|&&a| a != ArmKind::Oracle) {
        let (mut est, mut ora) = (Vec::new(), Vec::new());
        for r in metrics.iter().filter(|r| r.arm == arm) {
            if let Some(&o) = oracle_auroc.get(&(r.block.as_str(), r.seed, r.modality.as_str())) {
                est.push(r.auroc);
                ora.push(o);
            }
        }
        if let Ok(rmse) = rmse_vs_oracle(&est, &ora) {
            out.push(RmseRow { arm, quantity: "auroc".into(), rmse, points: est.len() });
        }
        let (mut est, mut ora) = (Vec::new(), Vec::new());
        for r in pid.iter().filter(|r| r.arm == arm) {
            if let Some(o) = oracle_pid.get(&(r.block.as_str(), r.seed)) {
                est.extend(r.components());
                ora.extend(o);
            }
        }
        if let Ok(rmse) = rmse_vs_oracle(&est, &ora) {
            out.push(RmseRow { arm, quantity: "pid".into(), rmse, points: est.len() });
        }
    }
    out
}

impl ExperimentReport {
    pub(super) fn assemble(cfg: ExperimentConfig, metrics: Vec<MetricRow>, pid: Vec<PidRow>, failures: Vec<Failure>) -> Self {
        let expected_metrics = cfg.blocks.len() * cfg.seeds.len() * cfg.arms.len() * 3;
        let pid_arms = cfg.arms.iter().filter(|a| a.pid_arm().is_some()).count();
        let expected_pid = if cfg.pid.enabled { cfg.blocks.len() * cfg.seeds.len() * pid_arms } else { 0 };
        let complete = failures.is_empty() && metrics.len() == expected_metrics && pid.len() == expected_pid;
        let summary = summarize(&cfg, &metrics, &pid);
        let rmse = rmse_rows(&cfg, &metrics, &pid);
        Self {
            name: cfg.name.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            complete,
            config: cfg,
            metrics,
            pid,
            summary,
            rmse,
            failures,
        }
    }

    pub fn cell(&self, block: &str, arm: ArmKind, column: &str) -> Option<&SummaryCell> {
        self.summary.iter().find(|c| c.block == block && c.arm == arm && c.column == column)
    }

    pub fn rmse(&self, arm: ArmKind, quantity: &str) -> Option<f64> {
        self.rmse.iter().find(|r| r.arm == arm && r.quantity == quantity).map(|r| r.rmse)
    }

    pub fn any_numerical_failure(&self) -> bool {
        self.failures.iter().any(|f| f.numerical)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Aligned text tables: one block per generator setting, one row per arm.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} (version {}, config {})", self.name, self.version, &self.config_hash[..12]);
        let _ = writeln!(s, "seeds: {:?}", self.config.seeds);
        if !self.complete {
            let _ = writeln!(s, "INCOMPLETE: {} failures", self.failures.len());
        }
        let with_pid = !self.pid.is_empty();
        let mut header = format!("{:<16}", "Arm");
        for c in AUROC_COLUMNS {
            let _ = write!(header, "{c:>14}");
        }
        if with_pid {
            for c in PID_COLUMNS {
                let _ = write!(header, "{c:>15}");
            }
        }
        for block in self.config.blocks.iter().map(|b| b.label()) {
            let _ = writeln!(s, "\n{block}");
            let _ = writeln!(s, "{header}");
            for &arm in &self.config.arms {
                let mut line = format!("{:<16}", arm.label());
                for c in AUROC_COLUMNS {
                    let cell = match self.cell(&block, arm, c) {
                        Some(x) => match x.batch_sd {
                            Some(sd) => format!("{:.2} ({:.2})", x.mean, sd),
                            None => format!("{:.2}", x.mean),
                        },
                        None => "-".into(),
                    };
                    let _ = write!(line, "{cell:>14}");
                }
                if with_pid {
                    for c in PID_COLUMNS {
                        let cell = self.cell(&block, arm, c).map_or("-".into(), |x| format!("{:.2}", x.mean));
                        let _ = write!(line, "{cell:>15}");
                    }
                }
                let _ = writeln!(s, "{}", line.trim_end());
            }
        }
        if !self.rmse.is_empty() {
            let _ = writeln!(s, "\nRMSE vs oracle");
            for r in &self.rmse {
                let _ = writeln!(s, "{:<22}{:<7}{:>10.4}  ({} points)", r.arm.name(), r.quantity, r.rmse, r.points);
            }
        }
        if !self.failures.is_empty() {
            let _ = writeln!(s, "\nFailures");
            for f in &self.failures {
                let arm = f.arm.map_or("-", |a| a.name());
                let _ = writeln!(s, "{} seed {} arm {} stage {}: {}", f.block, f.seed, arm, f.stage, f.message);
            }
        }
        s
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        std::fs::write(dir.join("report.txt"), self.to_text())?;
        Ok(())
    }
}

/// One cell of a reference table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRow {
    pub block: String,
    pub arm: ArmKind,
    pub column: String,
    pub value: f64,
}

impl ReferenceRow {
    /// Reads `block,arm,column,value` CSV with a header line; `#` lines are comments.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        let mut header = false;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !header {
                if line != "block,arm,column,value" {
                    return Err(Error::SchemaMismatch(format!("unexpected reference header `{line}`")));
                }
                header = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Parse(format!("line {}: expected 4 fields", lineno + 1)));
            }
            let value = f[3].trim().parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            out.push(ReferenceRow { block: f[0].trim().into(), arm: f[1].parse()?, column: f[2].trim().into(), value });
        }
        Ok(out)
    }
}

/// Per-cell tolerances: a default plus `block:arm:column=tol` rules with `*`
/// wildcards; the last matching rule wins.
#[derive(Debug, Clone, PartialEq)]
pub struct Tolerances {
    pub default: f64,
    rules: Vec<(String, String, String, f64)>,
}

impl Tolerances {
    pub fn new(default: f64) -> Self {
        Self { default, rules: Vec::new() }
    }

    pub fn rule(mut self, spec: &str) -> Result<Self> {
        let (pat, tol) = spec.rsplit_once('=').ok_or_else(|| Error::Parse(format!("rule `{spec}` lacks `=tol`")))?;
        let tol: f64 = tol.trim().parse().map_err(|_| Error::Parse(format!("bad tolerance in `{spec}`")))?;
        let parts: Vec<&str> = pat.split(':').collect();
        if parts.len() != 3 || !(tol >= 0.0) {
            return Err(Error::Parse(format!("rule `{spec}` must look like block:arm:column=tol")));
        }
        self.rules.push((parts[0].trim().into(), parts[1].trim().into(), parts[2].trim().into(), tol));
        Ok(self)
    }

    pub fn for_cell(&self, block: &str, arm: ArmKind, column: &str) -> f64 {
        let m = |p: &str, v: &str| p == "*" || p.eq_ignore_ascii_case(v);
        self.rules
            .iter()
            .rev()
            .find(|(b, a, c, _)| m(b, block) && m(a, arm.name()) && m(c, column))
            .map_or(self.default, |r| r.3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellVerdict {
    pub block: String,
    pub arm: ArmKind,
    pub column: String,
    pub reference: f64,
    pub estimate: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub cells: Vec<CellVerdict>,
}

impl Comparison {
    pub fn failures(&self) -> impl Iterator<Item = &CellVerdict> {
        self.cells.iter().filter(|c| !c.pass)
    }

    pub fn passed(&self) -> bool {
        self.cells.iter().all(|c| c.pass)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{} {:<16} {:<22} {:<14} estimate {:>7.3} reference {:>7.3} |diff| {:.3} tol {:.3}",
                if c.pass { "PASS" } else { "FAIL" },
                c.block,
                c.arm.name(),
                c.column,
                c.estimate,
                c.reference,
                (c.estimate - c.reference).abs(),
                c.tolerance
            );
        }
        let bad = self.failures().count();
        let _ = writeln!(s, "{} cells, {} passed, {} failed", self.cells.len(), self.cells.len() - bad, bad);
        s
    }
}

/// Checks every reference cell against the report's seed-averaged value.
pub fn compare_to_reference(report: &ExperimentReport, reference: &[ReferenceRow], tol: &Tolerances) -> Result<Comparison> {
    let mut cells = Vec::with_capacity(reference.len());
    for r in reference {
        let est = report.cell(&r.block, r.arm, &r.column).ok_or_else(|| {
            Error::SchemaMismatch(format!("report has no cell ({}, {}, {})", r.block, r.arm, r.column))
        })?;
        let tolerance = tol.for_cell(&r.block, r.arm, &r.column);
        cells.push(CellVerdict {
            block: r.block.clone(),
            arm: r.arm,
            column: r.column.clone(),
            reference: r.value,
            estimate: est.mean,
            tolerance,
            pass: (est.mean - r.value).abs() <= tolerance,
        });
    }
    Ok(Comparison { cells })
}
