//! Report files: JSON documents for full fidelity, CSV tables for plotting.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tta_core::metrics::{Aggregate, BatchSeries, MeanStd, RunReport, Transitions};
use tta_core::model::CallCounters;
use tta_core::tta::Strategy;

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
    /// Hash of the sources the binary was built from.
    pub content: String,
}

impl ToolInfo {
    pub fn current() -> Self {
        Self {
            name: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            content: env!("TTA_LAB_CONTENT").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub parameter_count: usize,
    /// `None` when the model was loaded rather than trained.
    pub val_accuracy: Option<f64>,
    pub final_train_loss: Option<f64>,
}

/// One adaptation run over one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub strategy: Strategy,
    /// Group name inside a study, e.g. `pcl`, `lr=0.0001`, `w/o norm`.
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub shift: String,
    pub samples: usize,
    pub correct: usize,
    pub direct_correct: usize,
    pub accuracy: f64,
    pub direct_accuracy: f64,
    pub throughput_sps: Option<f64>,
    pub wall_seconds: Option<f64>,
    pub transitions: Transitions,
    pub batch_series: BatchSeries,
    pub counters: CallCounters,
    pub updated_batches: usize,
    /// Study coordinates such as `lr`, `dropout_rate` or `segment`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
}

impl RunEntry {
    pub fn from_run(variant: &str, run: &RunReport, timing: bool) -> Self {
        Self {
            strategy: run.strategy,
            variant: variant.into(),
            seed: run.seed,
            config_hash: run.config_hash.clone(),
            shift: run.shift.clone(),
            samples: run.samples,
            correct: run.correct,
            direct_correct: run.direct_correct,
            accuracy: run.accuracy,
            direct_accuracy: run.direct_accuracy,
            throughput_sps: run.throughput_sps.filter(|_| timing),
            wall_seconds: timing.then_some(run.wall_seconds),
            transitions: run.transitions,
            batch_series: run.batch_series.clone(),
            counters: run.counters,
            updated_batches: run.updated_batches,
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.into(), value);
        self
    }

    /// Integer form of `accuracy − direct_accuracy == net / N`.
    pub fn transition_identity_holds(&self) -> bool {
        let t = &self.transitions;
        t.net == t.w_to_r - t.r_to_w && t.net == self.correct as i64 - self.direct_correct as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateEntry {
    pub variant: String,
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MeanStd>,
}

impl AggregateEntry {
    pub fn new(variant: &str, agg: Aggregate) -> Self {
        Self {
            variant: variant.into(),
            strategy: agg.strategy,
            seeds: agg.seeds,
            metrics: agg.metrics,
        }
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).map(|m| m.mean)
    }
}

/// Error-transition counts summed over seeds, one row per variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRow {
    pub variant: String,
    #[serde(rename = "R→W")]
    pub r_to_w: i64,
    #[serde(rename = "W→R")]
    pub w_to_r: i64,
    #[serde(rename = "Net Value")]
    pub net: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub tool: ToolInfo,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub source: SourceInfo,
    pub runs: Vec<RunEntry>,
    pub aggregate: Vec<AggregateEntry>,
    pub transitions: Vec<TransitionRow>,
    /// Study-specific summary numbers, e.g. a rank correlation.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub summary: BTreeMap<String, f64>,
}

impl Report {
    pub fn aggregate_for(&self, variant: &str) -> Option<&AggregateEntry> {
        self.aggregate.iter().find(|a| a.variant == variant)
    }

    /// The reproducible part of the report: everything except wall-clock
    /// numbers and the build stamp.
    pub fn payload(&self) -> serde_json::Value {
        let mut copy = self.clone();
        for r in &mut copy.runs {
            r.throughput_sps = None;
            r.wall_seconds = None;
        }
        for a in &mut copy.aggregate {
            a.metrics.remove("throughput_sps");
        }
        let mut v = serde_json::to_value(&copy).expect("serializable");
        v.as_object_mut().expect("object").remove("tool");
        v
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_text(path, &(self.to_json() + "\n"))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

/// Formats a float with 9 significant digits, C `%.9g` style.
pub fn fmt_float(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let fixed = format!("{v:.*}", (8 - exp) as usize);
        trim_zeros(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// A CSV table with a mandatory header row.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| LabError::Csv(csv::Error::from(e.into_error())))?;
        Ok(String::from_utf8(bytes).expect("utf-8 input"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv()?)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

/// Per-run rows: variant, strategy, seed, accuracy, transitions, throughput.
pub fn runs_table(report: &Report) -> Table {
    let mut param_keys: Vec<&String> = report.runs.iter().flat_map(|r| r.params.keys()).collect();
    param_keys.sort();
    param_keys.dedup();
    let mut header = vec!["variant", "strategy", "seed"];
    header.extend(param_keys.iter().map(|k| k.as_str()));
    header.extend([
        "accuracy",
        "direct_accuracy",
        "r_to_w",
        "w_to_r",
        "net",
        "throughput_sps",
    ]);
    let mut t = Table::new(&header);
    for r in &report.runs {
        let mut row = vec![
            r.variant.clone(),
            r.strategy.to_string(),
            r.seed.to_string(),
        ];
        row.extend(param_keys.iter().map(|k| opt(r.params.get(*k).copied())));
        row.extend([
            fmt_float(r.accuracy),
            fmt_float(r.direct_accuracy),
            r.transitions.r_to_w.to_string(),
            r.transitions.w_to_r.to_string(),
            r.transitions.net.to_string(),
            opt(r.throughput_sps),
        ]);
        t.push(row);
    }
    t
}

pub fn batch_series_table(report: &Report) -> Table {
    let mut t = Table::new(&[
        "variant",
        "seed",
        "batch",
        "accuracy",
        "mean_entropy",
        "loss",
    ]);
    for r in &report.runs {
        let s = &r.batch_series;
        for i in 0..s.accuracy.len() {
            t.push(vec![
                r.variant.clone(),
                r.seed.to_string(),
                i.to_string(),
                fmt_float(s.accuracy[i]),
                fmt_float(s.mean_entropy[i]),
                opt(s.loss[i]),
            ]);
        }
    }
    t
}

pub fn aggregate_table(report: &Report) -> Table {
    let mut t = Table::new(&["variant", "strategy", "metric", "mean", "std", "n"]);
    for a in &report.aggregate {
        for (name, m) in &a.metrics {
            t.push(vec![
                a.variant.clone(),
                a.strategy.to_string(),
                name.clone(),
                fmt_float(m.mean),
                fmt_float(m.std),
                a.seeds.len().to_string(),
            ]);
        }
    }
    t
}

pub fn transitions_table(report: &Report) -> Table {
    let mut t = Table::new(&["Method", "R→W", "W→R", "Net Value"]);
    for row in &report.transitions {
        t.push(vec![
            row.variant.clone(),
            row.r_to_w.to_string(),
            row.w_to_r.to_string(),
            row.net.to_string(),
        ]);
    }
    t
}

/// Writes `report.json` and the CSV tables into `dir`.
pub fn write_all(report: &Report, dir: &Path, extra: &[(&str, Table)]) -> Result<()> {
    report.write_json(&dir.join("report.json"))?;
    runs_table(report).write(&dir.join("runs.csv"))?;
    batch_series_table(report).write(&dir.join("batch_series.csv"))?;
    aggregate_table(report).write(&dir.join("aggregate.csv"))?;
    transitions_table(report).write(&dir.join("transitions.csv"))?;
    for (name, table) in extra {
        table.write(&dir.join(name))?;
    }
    Ok(())
}
