//! Reliability metrics: federated ECE, per-client ECE, NLL, accuracy and
//! predictive-entropy statistics.
//!
//! Every client is scored with its own model on its own test set. Confidence
//! bins are the equal-width half-open intervals `(s-1)/S < p <= s/S`, shared
//! by all clients; a confidence of exactly 0 falls into the first bin.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::OOD_LABEL;
use crate::error::{Error, Result};
use crate::nn::Matrix;

pub const DEFAULT_BINS: usize = 15;
pub const ENTROPY_BINS: usize = 30;
pub const PROB_EPS: f64 = 1e-12;

/// One client's predictions on its test set.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub client_id: usize,
    pub probs: Matrix,
    /// True labels, or [`OOD_LABEL`] for out-of-distribution samples.
    pub labels: Vec<usize>,
    pub model_id: String,
}

impl PredictionSet {
    pub fn new(client_id: usize, probs: Matrix, labels: Vec<usize>, model_id: impl Into<String>) -> Result<Self> {
        if probs.rows() != labels.len() {
            return Err(Error::shape("prediction labels", probs.rows(), labels.len()));
        }
        if probs.rows() == 0 {
            return Err(Error::InvalidArgument(format!("client {client_id} has no predictions")));
        }
        for (i, row) in probs.iter_rows().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidArgument(format!(
                    "client {client_id} row {i} is not a probability vector (sum {s})"
                )));
            }
        }
        let k = probs.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= k && y != OOD_LABEL) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        Ok(PredictionSet {
            client_id,
            probs,
            labels,
            model_id: model_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn require_labels(&self) -> Result<()> {
        if self.labels.contains(&OOD_LABEL) {
            return Err(Error::SentinelLabels { client: self.client_id });
        }
        Ok(())
    }
}

/// `(confidence, predicted class)`; ties go to the lowest class index.
pub fn confidence_and_prediction(row: &[f64]) -> (f64, usize) {
    let mut best = 0;
    for (k, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = k;
        }
    }
    (row[best], best)
}

/// Index (0-based) of the bin `(s/S, (s+1)/S]` containing `p`.
pub fn bin_index(p: f64, bins: usize) -> usize {
    let edge = |s: usize| s as f64 / bins as f64;
    let mut s = ((p * bins as f64).ceil() as usize).clamp(1, bins);
    while s > 1 && p <= edge(s - 1) {
        s -= 1;
    }
    while s < bins && p > edge(s) {
        s += 1;
    }
    s - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub client_id: usize,
    /// 1-based bin index.
    pub bin: usize,
    pub count: usize,
    pub conf: f64,
    pub acc: f64,
}

fn client_bins(set: &PredictionSet, bins: usize) -> Vec<BinStat> {
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (row, &y) in set.probs.iter_rows().zip(&set.labels) {
        let (p, pred) = confidence_and_prediction(row);
        let s = bin_index(p, bins);
        count[s] += 1;
        conf[s] += p;
        if pred == y {
            hits[s] += 1;
        }
    }
    (0..bins)
        .map(|s| {
            let (c, a) = if count[s] == 0 {
                (0.0, 0.0)
            } else {
                (conf[s] / count[s] as f64, hits[s] as f64 / count[s] as f64)
            };
            BinStat {
                client_id: set.client_id,
                bin: s + 1,
                count: count[s],
                conf: c,
                acc: a,
            }
        })
        .collect()
}

fn check_bins(bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(Error::InvalidArgument("bin count must be >= 1".into()));
    }
    Ok(())
}

/// Federated expected calibration error and the per-client bin table.
///
/// `F-ECE = sum_i sum_s |B_s^i| / sum_i n_i * |conf_s^i - acc_s^i|`.
pub fn f_ece(sets: &[PredictionSet], bins: usize) -> Result<(f64, Vec<BinStat>)> {
    check_bins(bins)?;
    if sets.is_empty() {
        return Err(Error::InvalidArgument("F-ECE needs at least one client".into()));
    }
    for s in sets {
        s.require_labels()?;
    }
    let total: usize = sets.iter().map(PredictionSet::len).sum();
    let mut table = Vec::with_capacity(sets.len() * bins);
    let mut value = 0.0;
    for set in sets {
        let stats = client_bins(set, bins);
        for b in &stats {
            value += b.count as f64 / total as f64 * (b.conf - b.acc).abs();
        }
        table.extend(stats);
    }
    Ok((value, table))
}

/// Classic ECE of a single prediction set (F-ECE with one client).
pub fn ece_single(set: &PredictionSet, bins: usize) -> Result<f64> {
    Ok(f_ece(std::slice::from_ref(set), bins)?.0)
}

/// Mean of `-ln max(p_true, 1e-12)` over every sample of every set.
pub fn nll(sets: &[PredictionSet]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for set in sets {
        set.require_labels()?;
        for (row, &y) in set.probs.iter_rows().zip(&set.labels) {
            sum -= row[y].max(PROB_EPS).ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("NLL of an empty prediction list".into()));
    }
    Ok(sum / n as f64)
}

pub fn accuracy(sets: &[PredictionSet]) -> Result<f64> {
    let mut hits = 0usize;
    let mut n = 0usize;
    for set in sets {
        set.require_labels()?;
        for (row, &y) in set.probs.iter_rows().zip(&set.labels) {
            if confidence_and_prediction(row).1 == y {
                hits += 1;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("accuracy of an empty prediction list".into()));
    }
    Ok(hits as f64 / n as f64)
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(row: &[f64]) -> f64 {
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub mean: f64,
    /// `bins + 1` equally spaced edges over `[0, ln K]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl EntropySummary {
    pub fn from_values(values: &[f64], classes: usize, bins: usize) -> Self {
        let max = (classes as f64).ln();
        let edges: Vec<f64> = (0..=bins).map(|b| max * b as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for &h in values {
            let b = ((h / max * bins as f64).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        let mean = if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        };
        EntropySummary { mean, edges, counts }
    }
}

/// Per-sample entropies over all sets plus the fixed-edge histogram.
pub fn predictive_entropy(sets: &[PredictionSet]) -> (Vec<f64>, EntropySummary) {
    predictive_entropy_with(sets, ENTROPY_BINS)
}

pub fn predictive_entropy_with(sets: &[PredictionSet], hist_bins: usize) -> (Vec<f64>, EntropySummary) {
    let classes = sets.first().map_or(2, |s| s.probs.cols()).max(2);
    let values: Vec<f64> = sets.iter().flat_map(|s| s.probs.iter_rows().map(entropy)).collect();
    let summary = EntropySummary::from_values(&values, classes, hist_bins);
    (values, summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEce {
    pub client_id: usize,
    pub samples: usize,
    pub ece: f64,
}

/// In-domain reliability report for one model family over all clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub model: String,
    pub bins: usize,
    pub f_ece: f64,
    pub nll: f64,
    pub accuracy: f64,
    pub per_client: Vec<ClientEce>,
    pub bin_table: Vec<BinStat>,
    pub entropy: EntropySummary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_hash: Option<String>,
}

impl CalibrationReport {
    pub fn compute(model: &str, sets: &[PredictionSet], bins: usize) -> Result<Self> {
        Self::compute_with(model, sets, bins, ENTROPY_BINS)
    }

    /// Like [`compute`](Self::compute) with an explicit entropy histogram size.
    pub fn compute_with(model: &str, sets: &[PredictionSet], bins: usize, hist_bins: usize) -> Result<Self> {
        let (value, bin_table) = f_ece(sets, bins)?;
        let per_client = sets
            .iter()
            .map(|s| {
                Ok(ClientEce {
                    client_id: s.client_id,
                    samples: s.len(),
                    ece: ece_single(s, bins)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (_, entropy) = predictive_entropy_with(sets, hist_bins);
        Ok(CalibrationReport {
            model: model.to_string(),
            bins,
            f_ece: value,
            nll: nll(sets)?,
            accuracy: accuracy(sets)?,
            per_client,
            bin_table,
            entropy,
            config_hash: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `client_id,bin,count,conf,acc`
    pub fn write_bin_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for b in &self.bin_table {
            w.serialize(b)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_entropy_csv<W: Write>(&self, out: W) -> Result<()> {
        write_entropy_csv(&self.entropy, out)
    }

    /// Writes `<stem>.json`, `<stem>_bins.csv` and `<stem>_entropy.csv` into `dir`.
    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let bins = dir.join(format!("{stem}_bins.csv"));
        self.write_bin_csv(std::fs::File::create(&bins).map_err(|e| Error::io(&bins, e))?)?;
        let ent = dir.join(format!("{stem}_entropy.csv"));
        self.write_entropy_csv(std::fs::File::create(&ent).map_err(|e| Error::io(&ent, e))?)?;
        Ok(vec![json, bins, ent])
    }
}

/// `bin_low,bin_high,count`
pub fn write_entropy_csv<W: Write>(summary: &EntropySummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bin_low", "bin_high", "count"])?;
    for (b, c) in summary.counts.iter().enumerate() {
        w.write_record([
            summary.edges[b].to_string(),
            summary.edges[b + 1].to_string(),
            c.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Entropy-only report for out-of-distribution predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub model: String,
    pub samples: usize,
    pub entropy: EntropySummary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_hash: Option<String>,
}

impl OodReport {
    pub fn compute(model: &str, sets: &[PredictionSet]) -> Self {
        Self::compute_with(model, sets, ENTROPY_BINS)
    }

    pub fn compute_with(model: &str, sets: &[PredictionSet], hist_bins: usize) -> Self {
        let (values, entropy) = predictive_entropy_with(sets, hist_bins);
        OodReport {
            model: model.to_string(),
            samples: values.len(),
            entropy,
            config_hash: None,
        }
    }

    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let ent = dir.join(format!("{stem}_entropy.csv"));
        write_entropy_csv(
            &self.entropy,
            std::fs::File::create(&ent).map_err(|e| Error::io(&ent, e))?,
        )?;
        Ok(vec![json, ent])
    }
}
