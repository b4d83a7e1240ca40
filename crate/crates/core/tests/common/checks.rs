//! Self-contained pass/fail checks used by the acceptance target and the regular tests.

use std::path::Path;

use fedrel_core::aph::{cost_fraction, CostModel, Overhead};
use fedrel_core::data;
use fedrel_core::metrics::{self, PredictionSet};
use fedrel_core::{Error, Matrix};
use rand::Rng;

use super::{brute_f_ece, random_rows};

/// Library F-ECE against the double-loop oracle on `instances` random cases.
pub fn f_ece_matches_oracle(
    instances: usize,
    max_clients: usize,
    max_samples: usize,
    max_bins: usize,
    tol: f64,
) -> Result<(), String> {
    let mut rng = fedrel_core::seed::rng(1234);
    for i in 0..instances {
        let bins = rng.random_range(1..=max_bins);
        let k = rng.random_range(2..=5);
        let n_clients = rng.random_range(1..=max_clients);
        let mut raw = Vec::new();
        let mut sets = Vec::new();
        for c in 0..n_clients {
            let n = rng.random_range(1..=max_samples);
            let rows = random_rows(&mut rng, n, k, bins);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let m = Matrix::from_rows(&rows).map_err(|e| e.to_string())?;
            sets.push(PredictionSet::new(c, m, labels.clone(), "oracle").map_err(|e| e.to_string())?);
            raw.push((rows, labels));
        }
        let (got, _) = metrics::f_ece(&sets, bins).map_err(|e| e.to_string())?;
        let want = brute_f_ece(&raw, bins);
        if (got - want).abs() > tol {
            return Err(format!("instance {i}: f_ece {got} vs oracle {want}"));
        }
    }
    Ok(())
}

/// Predictions whose confidence is, by construction, the probability of being right.
pub fn calibrated_ece(n: usize, bins: usize, seed: u64) -> f64 {
    let mut rng = fedrel_core::seed::rng(seed);
    let k = 4;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c: f64 = rng.random_range(1.0 / k as f64..=1.0);
        let top = rng.random_range(0..k);
        let mut row = vec![(1.0 - c) / (k - 1) as f64; k];
        row[top] = c;
        let y = if rng.random::<f64>() < c {
            top
        } else {
            // uniformly among the wrong classes
            (top + rng.random_range(1..k)) % k
        };
        rows.push(row);
        labels.push(y);
    }
    let set = PredictionSet::new(0, Matrix::from_rows(&rows).unwrap(), labels, "calibrated").unwrap();
    metrics::ece_single(&set, bins).unwrap()
}

/// F-ECE of one-hot predictions that are all correct, split over three clients.
pub fn confident_correct_f_ece(bins: usize) -> f64 {
    let sets: Vec<PredictionSet> = (0..3)
        .map(|c| {
            let rows: Vec<Vec<f64>> = (0..10)
                .map(|i| {
                    let mut r = vec![0.0; 3];
                    r[(i + c) % 3] = 1.0;
                    r
                })
                .collect();
            let labels = (0..10).map(|i| (i + c) % 3).collect();
            PredictionSet::new(c, Matrix::from_rows(&rows).unwrap(), labels, "onehot").unwrap()
        })
        .collect();
    metrics::f_ece(&sets, bins).unwrap().0
}

/// Overheads of a head that is `c` of the forward pass, in percent, for each ensemble size.
pub fn overhead_percent(c: f64, heads: &[usize]) -> Vec<f64> {
    let cost = CostModel::from_head_fraction(c);
    heads
        .iter()
        .map(|&m| 100.0 * cost_fraction(&cost, m, Overhead::AllHeads))
        .collect()
}

/// The published overheads for 10, 50 and 100 heads, in percent.
pub const PUBLISHED_OVERHEAD: [(usize, f64); 3] = [(10, 2.44), (50, 12.25), (100, 24.49)];

pub fn cost_model_matches(tol_pp: f64) -> Result<(), String> {
    let heads: Vec<usize> = PUBLISHED_OVERHEAD.iter().map(|p| p.0).collect();
    let got = overhead_percent(0.002449, &heads);
    let exact = [2.449, 12.245, 24.49];
    for ((g, e), (m, published)) in got.iter().zip(exact).zip(PUBLISHED_OVERHEAD) {
        if (g - e).abs() > 1e-9 || (g - published).abs() > tol_pp {
            return Err(format!("M={m}: {g:.4}% (published {published}%)"));
        }
    }
    // extra cost counts only the heads beyond the single model's own; with
    // M * c the bound is hit exactly (30%) at c = 0.003
    for i in 0..=300 {
        let c = 0.003 * i as f64 / 300.0;
        let f = 100.0 * cost_fraction(&CostModel::from_head_fraction(c), 100, Overhead::ExtraHeads);
        if f >= 30.0 {
            return Err(format!("c={c}: 100 heads cost {f}%"));
        }
    }
    Ok(())
}

fn cifar_record(label: u8, fill: u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend((0..3072).map(|i| fill.wrapping_add(i as u8)));
    r
}

/// Valid, truncated, bad-label and missing fixture files.
pub fn cifar_fixtures(dir: &Path) -> Result<(), String> {
    let good = dir.join("good.bin");
    let bytes: Vec<u8> = [cifar_record(3, 0), cifar_record(9, 100)].concat();
    std::fs::write(&good, &bytes).map_err(|e| e.to_string())?;
    let ds = data::load_cifar10_binary(&good).map_err(|e| e.to_string())?;
    if (ds.len(), ds.dim(), ds.classes) != (2, 3072, 10) || ds.labels != [3, 9] {
        return Err(format!(
            "valid file parsed as {} x {} with labels {:?}",
            ds.len(),
            ds.dim(),
            ds.labels
        ));
    }
    if ds.inputs.row(1)[0] != 100.0 / 255.0 || ds.inputs.row(0)[1025] != 1.0 / 255.0 {
        return Err("pixel scaling is wrong".into());
    }
    if data::to_cifar10_bytes(&ds).map_err(|e| e.to_string())? != bytes {
        return Err("parse -> serialize round trip is not byte-identical".into());
    }

    let short = dir.join("short.bin");
    std::fs::write(&short, &bytes[..bytes.len() - 7]).map_err(|e| e.to_string())?;
    match data::load_cifar10_binary(&short) {
        Err(Error::CifarLength {
            len: 6139,
            offset: 3073,
        }) => {}
        other => return Err(format!("truncated file: {other:?}")),
    }

    let bad = dir.join("bad.bin");
    std::fs::write(&bad, [cifar_record(1, 0), cifar_record(10, 0)].concat()).map_err(|e| e.to_string())?;
    match data::load_cifar10_binary(&bad) {
        Err(Error::CifarLabel { record: 1, label: 10 }) => {}
        other => return Err(format!("bad label: {other:?}")),
    }

    match data::load_cifar10_binary(&dir.join("absent.bin")) {
        Err(Error::Io { .. }) => Ok(()),
        other => Err(format!("missing file: {other:?}")),
    }
}
