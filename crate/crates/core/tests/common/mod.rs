//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the library's numerical code: the forward pass,
//! loss and calibration error are re-derived from their definitions.

#![allow(dead_code)]

pub mod checks;
pub mod grad;
pub mod protocol;
pub mod runs;

use fedrel_core::harness::config::ExperimentConfig;
use rand::Rng;

/// F-ECE by explicit double loop over clients and bins.
///
/// Bin `s` (1-based) is the half-open interval `((s-1)/S, s/S]`; a sample's
/// confidence is its largest class probability and its prediction the first
/// class attaining it.
pub fn brute_f_ece(clients: &[(Vec<Vec<f64>>, Vec<usize>)], bins: usize) -> f64 {
    let total: usize = clients.iter().map(|(p, _)| p.len()).sum();
    let mut out = 0.0;
    for (probs, labels) in clients {
        for s in 1..=bins {
            let lo = (s - 1) as f64 / bins as f64;
            let hi = s as f64 / bins as f64;
            let mut n = 0usize;
            let mut conf = 0.0;
            let mut correct = 0usize;
            for (row, &y) in probs.iter().zip(labels) {
                let mut arg = 0;
                for k in 0..row.len() {
                    if row[k] > row[arg] {
                        arg = k;
                    }
                }
                let c = row[arg];
                let inside = if s == 1 { c <= hi } else { c > lo && c <= hi };
                if inside {
                    n += 1;
                    conf += c;
                    if arg == y {
                        correct += 1;
                    }
                }
            }
            if n > 0 {
                let gap = (correct as f64 / n as f64 - conf / n as f64).abs();
                out += n as f64 / total as f64 * gap;
            }
        }
    }
    out
}

/// Random probability rows, with some rows forced onto bin edges and ties.
pub fn random_rows<R: Rng>(rng: &mut R, n: usize, k: usize, bins: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| match rng.random_range(0..6) {
            // confidence exactly on an edge s/S (when representable as a max)
            0 => {
                let s = rng.random_range(1..=bins);
                let c = s as f64 / bins as f64;
                if c < 1.0 / k as f64 {
                    vec![1.0 / k as f64; k]
                } else {
                    let rest = (1.0 - c) / (k - 1) as f64;
                    let mut row = vec![rest; k];
                    let j = rng.random_range(0..k);
                    row[j] = c;
                    row
                }
            }
            // exact tie
            1 => vec![1.0 / k as f64; k],
            // one-hot
            2 => {
                let mut row = vec![0.0; k];
                row[rng.random_range(0..k)] = 1.0;
                row
            }
            _ => {
                let mut row: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(3) + 1e-3).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
                row
            }
        })
        .collect()
}

/// Layer widths from input to output, and which layers apply ReLU.
pub struct OracleNet {
    pub widths: Vec<usize>,
    pub relu: Vec<bool>,
}

impl OracleNet {
    /// Extractor layers all use ReLU (including the feature layer); head layers
    /// use ReLU on every layer but the last.
    pub fn new(input: usize, extractor: &[usize], head: &[usize]) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(extractor);
        widths.extend_from_slice(head);
        let mut relu = vec![true; extractor.len()];
        relu.extend((0..head.len()).map(|i| i + 1 < head.len()));
        OracleNet { widths, relu }
    }

    /// Parameters as one flat vector: for each layer `W` (out x in, row-major) then `b`.
    pub fn param_len(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Mean cross-entropy and every pre-activation value.
    pub fn loss(&self, params: &[f64], xs: &[Vec<f64>], ys: &[usize]) -> (f64, Vec<f64>) {
        let mut pre_all = Vec::new();
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let mut a = x.clone();
            let mut off = 0;
            for (l, w) in self.widths.windows(2).enumerate() {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = &params[off..off + fan_in * fan_out];
                let bias = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
                off += fan_in * fan_out + fan_out;
                let mut z = vec![0.0; fan_out];
                for o in 0..fan_out {
                    let mut acc = bias[o];
                    for i in 0..fan_in {
                        acc += weights[o * fan_in + i] * a[i];
                    }
                    z[o] = acc;
                }
                if self.relu[l] {
                    pre_all.extend_from_slice(&z);
                    a = z.into_iter().map(|v| v.max(0.0)).collect();
                } else {
                    a = z;
                }
            }
            let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - a[y];
        }
        (total / xs.len() as f64, pre_all)
    }

    pub fn probs(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut off = 0;
        for (l, w) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut z = vec![0.0; fan_out];
            for (o, zo) in z.iter_mut().enumerate() {
                let mut acc = params[off + fan_in * fan_out + o];
                for i in 0..fan_in {
                    acc += params[off + o * fan_in + i] * a[i];
                }
                *zo = acc;
            }
            off += fan_in * fan_out + fan_out;
            a = if self.relu[l] {
                z.into_iter().map(|v| v.max(0.0)).collect()
            } else {
                z
            };
        }
        let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = a.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }
}

/// A small, fast experiment for harness tests.
pub fn tiny_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::synthetic(seed);
    cfg.data.classes = 3;
    cfg.data.dim = 6;
    cfg.data.samples_per_class = 40;
    cfg.model.extractor_layers = vec![8];
    cfg.model.head_hidden = vec![6];
    cfg.fed.clients = 3;
    cfg.fed.rounds = 4;
    cfg.fed.local_epochs = 2;
    cfg.fed.batch_size = 16;
    if let Some(a) = cfg.aph.as_mut() {
        a.heads = 3;
        a.epochs = 2;
    }
    cfg.finetune.rounds = 2;
    cfg
}

/// Every file under `dir` (relative path, bytes), sorted by path.
pub fn snapshot(dir: &std::path::Path, skip: &[&str]) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, skip: &[&str], out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().to_string();
            if skip.iter().any(|s| rel == *s) {
                continue;
            }
            if p.is_dir() {
                walk(root, &p, skip, out);
            } else {
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, skip, &mut out);
    out.sort();
    out
}
