//! Evaluation report: one row per (regime, bit, seed) cell plus per
//! (regime, bit) aggregates, emitted as CSV or JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Regime;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// CSV column order.
pub const COLUMNS: [&str; 13] = [
    "schema_version",
    "row_kind",
    "regime",
    "bits",
    "seed",
    "status",
    "n_seeds",
    "eval_loss",
    "eval_loss_std",
    "eval_accuracy",
    "eval_accuracy_std",
    "trainable_param_count",
    "reason",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub regime: Regime,
    pub bits: u32,
    pub seed: u64,
    pub status: CellStatus,
    pub eval_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    pub trainable_param_count: usize,
    pub reason: Option<String>,
}

impl CellResult {
    pub fn failed(regime: Regime, bits: u32, seed: u64, reason: String) -> Self {
        Self {
            regime,
            bits,
            seed,
            status: CellStatus::Failed,
            eval_loss: None,
            eval_accuracy: None,
            trainable_param_count: 0,
            reason: Some(reason),
        }
    }

    /// Directory name under `cells/`.
    pub fn id(&self) -> String {
        cell_id(self.regime, self.bits, self.seed)
    }
}

pub fn cell_id(regime: Regime, bits: u32, seed: u64) -> String {
    format!("{}-b{bits}-s{seed}", regime.name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub regime: Regime,
    pub bits: u32,
    /// Successful cells contributing to the statistics.
    pub n_seeds: usize,
    pub eval_loss_mean: Option<f64>,
    /// Sample standard deviation; absent with fewer than two seeds.
    pub eval_loss_std: Option<f64>,
    pub eval_accuracy_mean: Option<f64>,
    pub eval_accuracy_std: Option<f64>,
    pub trainable_param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Unquantized base model on the same eval split.
    pub reference: Option<Reference>,
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
}

impl EvalReport {
    /// Report with aggregates recomputed from `cells`.
    pub fn new(reference: Option<Reference>, cells: Vec<CellResult>) -> Self {
        let aggregates = aggregate(&cells);
        Self {
            schema_version: SCHEMA_VERSION,
            reference,
            cells,
            aggregates,
        }
    }

    pub fn aggregate_for(&self, regime: Regime, bits: u32) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.regime == regime && a.bits == bits)
    }
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(mean), None);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

/// Per (regime, bits) statistics over successful cells, in first-seen order.
pub fn aggregate(cells: &[CellResult]) -> Vec<Aggregate> {
    let mut groups: Vec<((Regime, u32), Vec<&CellResult>)> = Vec::new();
    for c in cells {
        let key = (c.regime, c.bits);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(c),
            None => groups.push((key, vec![c])),
        }
    }
    groups
        .into_iter()
        .map(|((regime, bits), group)| {
            let ok: Vec<&CellResult> = group.into_iter().filter(|c| c.status == CellStatus::Ok).collect();
            let losses: Vec<f64> = ok.iter().filter_map(|c| c.eval_loss).collect();
            let accs: Vec<f64> = ok.iter().filter_map(|c| c.eval_accuracy).collect();
            let (eval_loss_mean, eval_loss_std) = mean_std(&losses);
            let (eval_accuracy_mean, eval_accuracy_std) = mean_std(&accs);
            Aggregate {
                regime,
                bits,
                n_seeds: ok.len(),
                eval_loss_mean,
                eval_loss_std,
                eval_accuracy_mean,
                eval_accuracy_std,
                trainable_param_count: ok.first().map_or(0, |c| c.trainable_param_count),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::InvalidConfig(format!("unknown report format {other:?}"))),
        }
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn to_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    let version = report.schema_version.to_string();
    for c in &report.cells {
        let status = match c.status {
            CellStatus::Ok => "ok",
            CellStatus::Failed => "failed",
        };
        w.write_record([
            version.as_str(),
            "cell",
            c.regime.name(),
            &c.bits.to_string(),
            &c.seed.to_string(),
            status,
            "",
            &opt(c.eval_loss),
            "",
            &opt(c.eval_accuracy),
            "",
            &c.trainable_param_count.to_string(),
            c.reason.as_deref().unwrap_or(""),
        ])?;
    }
    for a in &report.aggregates {
        w.write_record([
            version.as_str(),
            "aggregate",
            a.regime.name(),
            &a.bits.to_string(),
            "",
            "",
            &a.n_seeds.to_string(),
            &opt(a.eval_loss_mean),
            &opt(a.eval_loss_std),
            &opt(a.eval_accuracy_mean),
            &opt(a.eval_accuracy_std),
            &a.trainable_param_count.to_string(),
            "",
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn to_json(report: &EvalReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Json => to_json(report)?,
        ReportFormat::Csv => to_csv(report)?,
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(regime: Regime, bits: u32, seed: u64, loss: f64) -> CellResult {
        CellResult {
            regime,
            bits,
            seed,
            status: CellStatus::Ok,
            eval_loss: Some(loss),
            eval_accuracy: Some(loss / 10.0),
            trainable_param_count: 12,
            reason: None,
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let csv = to_csv(&EvalReport::new(None, vec![])).unwrap();
        assert_eq!(csv, format!("{}\n", COLUMNS.join(",")));
    }

    #[test]
    fn json_round_trip() {
        let mut cells = vec![cell(Regime::PostGiftsw, 2, 0, 2.1), cell(Regime::PostGiftsw, 2, 1, 2.3)];
        cells.push(CellResult::failed(Regime::PreGiftsw, 2, 0, "boom".into()));
        let r = EvalReport::new(Some(Reference { eval_loss: 1.5, eval_accuracy: 0.4 }), cells);
        let back: EvalReport = serde_json::from_str(&to_json(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        let failed = r.aggregate_for(Regime::PreGiftsw, 2).unwrap();
        assert_eq!(failed.n_seeds, 0);
        assert_eq!(failed.eval_loss_mean, None);
    }

    #[test]
    fn aggregates_match_recomputation() {
        let losses = [2.0, 2.5, 3.25, 1.75, 2.2];
        let cells: Vec<_> = losses
            .iter()
            .enumerate()
            .map(|(s, &l)| cell(Regime::BaselineFrozen, 4, s as u64, l))
            .collect();
        let r = EvalReport::new(None, cells);
        let a = r.aggregate_for(Regime::BaselineFrozen, 4).unwrap();
        let mean = losses.iter().sum::<f64>() / 5.0;
        let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((a.eval_loss_mean.unwrap() - mean).abs() < 1e-12);
        assert!((a.eval_loss_std.unwrap() - var.sqrt()).abs() < 1e-12);
        assert_eq!(a.n_seeds, 5);

        let csv = to_csv(&r).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows.len(), 1 + 5 + 1);
        assert!(rows[6].starts_with("1,aggregate,baseline_frozen,4,,,5,"));
    }

    #[test]
    fn format_parses() {
        assert_eq!("csv".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
        assert!("xml".parse::<ReportFormat>().is_err());
    }
}
