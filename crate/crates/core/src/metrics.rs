//! Scoring of adaptation runs. This is the only module that reads hidden labels.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autodiff::PROB_FLOOR;
use crate::datagen::Stream;
use crate::error::{Error, Result};
use crate::model::CallCounters;
use crate::tensor::Tensor;
use crate::tta::{BatchOutcome, Strategy};

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::dims("accuracy", &[preds.len()], &[labels.len()]));
    }
    if preds.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    Ok(correct_count(preds, labels) as f64 / preds.len() as f64)
}

fn correct_count(preds: &[usize], labels: &[usize]) -> usize {
    preds.iter().zip(labels).filter(|(p, y)| p == y).count()
}

/// Per-sample flips between the unadapted model and the adapted one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Transitions {
    pub r_to_w: i64,
    pub w_to_r: i64,
    pub net: i64,
}

impl core::ops::AddAssign for Transitions {
    fn add_assign(&mut self, rhs: Self) {
        self.r_to_w += rhs.r_to_w;
        self.w_to_r += rhs.w_to_r;
        self.net += rhs.net;
    }
}

pub fn transitions(direct: &[usize], adapted: &[usize], labels: &[usize]) -> Result<Transitions> {
    if direct.len() != labels.len() || adapted.len() != labels.len() {
        return Err(Error::dims(
            "transitions",
            &[direct.len(), adapted.len()],
            &[labels.len()],
        ));
    }
    let mut t = Transitions::default();
    for ((d, a), y) in direct.iter().zip(adapted).zip(labels) {
        match (d == y, a == y) {
            (true, false) => t.r_to_w += 1,
            (false, true) => t.w_to_r += 1,
            _ => {}
        }
    }
    t.net = t.w_to_r - t.r_to_w;
    Ok(t)
}

pub fn throughput(samples: usize, wall_seconds: f64) -> Result<f64> {
    if !(wall_seconds > 0.0) {
        return Err(Error::param("wall_seconds", "duration must be positive"));
    }
    Ok(samples as f64 / wall_seconds)
}

/// Mean row entropy of a probability matrix, natural log.
pub fn mean_entropy(p: &Tensor) -> Result<f64> {
    let (n, _) = p.dims2("mean_entropy")?;
    if n == 0 {
        return Err(Error::Empty("mean_entropy"));
    }
    let total: f64 = (0..n)
        .map(|i| {
            -p.row(i)
                .iter()
                .map(|&q| q * libm::log(q.max(PROB_FLOOR)))
                .sum::<f64>()
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Empty("mean_std"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        libm::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
    };
    Ok(MeanStd { mean, std })
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = alloc::vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // ties share the average rank
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::dims("spearman", &[xs.len()], &[ys.len()]));
    }
    if xs.len() < 2 {
        return Err(Error::Empty("spearman"));
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / libm::sqrt(sxx * syy))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchSeries {
    pub accuracy: Vec<f64>,
    pub mean_entropy: Vec<f64>,
    /// Last loss of each batch; `None` where the batch made no update.
    pub loss: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub config_hash: String,
    pub shift: String,
    pub samples: usize,
    pub correct: usize,
    pub direct_correct: usize,
    pub accuracy: f64,
    pub direct_accuracy: f64,
    /// Samples per second over the adaptation calls; absent when the clock did not advance.
    pub throughput_sps: Option<f64>,
    pub wall_seconds: f64,
    pub transitions: Transitions,
    pub batch_series: BatchSeries,
    pub loss_traces: Vec<Vec<f64>>,
    /// Forward passes made during the run.
    pub counters: CallCounters,
    pub updated_batches: usize,
}

impl RunReport {
    /// `w_to_r − r_to_w == N·(acc_tta − acc_direct)`, checked on integer counts.
    pub fn transition_identity_holds(&self) -> bool {
        let delta = self.correct as i64 - self.direct_correct as i64;
        self.transitions.net == self.transitions.w_to_r - self.transitions.r_to_w
            && self.transitions.net == delta
    }

    pub fn mean_entropy_first_last(&self) -> Option<(f64, f64)> {
        let s = &self.batch_series.mean_entropy;
        Some((*s.first()?, *s.last()?))
    }
}

/// Scores a finished stream. Called by the adaptation driver with its outcomes.
pub fn build_report(
    strategy: Strategy,
    seed: u64,
    stream: &Stream,
    outcomes: &[BatchOutcome],
    direct: &[Vec<usize>],
    wall_seconds: f64,
    counters: CallCounters,
) -> Result<RunReport> {
    if outcomes.len() != stream.batches.len() || direct.len() != stream.batches.len() {
        return Err(Error::dims(
            "build_report",
            &[outcomes.len(), direct.len()],
            &[stream.batches.len()],
        ));
    }
    let mut series = BatchSeries::default();
    let mut trans = Transitions::default();
    let (mut correct, mut direct_correct, mut samples) = (0, 0, 0);
    for ((batch, out), d) in stream.batches.iter().zip(outcomes).zip(direct) {
        let labels = batch.labels.reveal();
        series.accuracy.push(accuracy(&out.predictions, labels)?);
        series.mean_entropy.push(out.mean_entropy_after);
        series.loss.push(out.loss_trace.last().copied());
        trans += transitions(d, &out.predictions, labels)?;
        correct += correct_count(&out.predictions, labels);
        direct_correct += correct_count(d, labels);
        samples += labels.len();
    }
    if samples == 0 {
        return Err(Error::Empty("stream"));
    }
    Ok(RunReport {
        strategy,
        seed,
        config_hash: String::new(),
        shift: stream.shift.label(),
        samples,
        correct,
        direct_correct,
        accuracy: correct as f64 / samples as f64,
        direct_accuracy: direct_correct as f64 / samples as f64,
        throughput_sps: throughput(samples, wall_seconds).ok(),
        wall_seconds,
        transitions: trans,
        batch_series: series,
        loss_traces: outcomes.iter().map(|o| o.loss_trace.clone()).collect(),
        counters,
        updated_batches: outcomes.iter().filter(|o| o.updated()).count(),
    })
}

/// Per-metric mean and standard deviation across seeds of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub strategy: Strategy,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MeanStd>,
}

pub fn aggregate(reports: &[RunReport]) -> Result<Aggregate> {
    let first = reports.first().ok_or(Error::Empty("aggregate"))?;
    if let Some(r) = reports
        .iter()
        .find(|r| r.strategy != first.strategy || r.config_hash != first.config_hash)
    {
        return Err(Error::Aggregation(format!(
            "mixed configurations: {}/{} vs {}/{}",
            first.strategy, first.config_hash, r.strategy, r.config_hash
        )));
    }
    // Sort by seed so the result does not depend on report order.
    let mut sorted: Vec<&RunReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.seed);

    let column = |f: &dyn Fn(&RunReport) -> f64| -> Result<MeanStd> {
        let v: Vec<f64> = sorted.iter().map(|r| f(r)).collect();
        mean_std(&v)
    };
    let mut metrics = BTreeMap::new();
    metrics.insert("accuracy".into(), column(&|r| r.accuracy)?);
    metrics.insert("direct_accuracy".into(), column(&|r| r.direct_accuracy)?);
    metrics.insert("r_to_w".into(), column(&|r| r.transitions.r_to_w as f64)?);
    metrics.insert("w_to_r".into(), column(&|r| r.transitions.w_to_r as f64)?);
    metrics.insert("net".into(), column(&|r| r.transitions.net as f64)?);
    metrics.insert(
        "final_mean_entropy".into(),
        column(&|r| r.batch_series.mean_entropy.last().copied().unwrap_or(0.0))?,
    );
    let tp: Vec<f64> = sorted.iter().filter_map(|r| r.throughput_sps).collect();
    if tp.len() == sorted.len() {
        metrics.insert("throughput_sps".into(), mean_std(&tp)?);
    }
    Ok(Aggregate {
        strategy: first.strategy,
        config_hash: first.config_hash.clone(),
        seeds: sorted.iter().map(|r| r.seed).collect(),
        metrics,
    })
}
