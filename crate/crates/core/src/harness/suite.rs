//! Multi-seed experiment suites: impact-factor sweeps and the APH comparison.
//!
//! Every suite produces per-seed rows, a mean ± std summary per condition and a
//! list of checks. Gating checks decide the suite's pass/fail status; the
//! others are reported for information only.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::pipeline::{self, AphPoint, Evaluation};
use crate::aph::{self, HeadEnsemble, BETA_HIGH_GRID};
use crate::error::{Error, Result};
use crate::fed;
use crate::metrics::entropy;

/// Slack on the averaged-vs-per-head entropy inequality.
pub const JENSEN_SLACK: f64 = 1e-12;
/// Largest mean OOD entropy change allowed for head fine-tuning, in nats.
pub const FINETUNE_OOD_SHIFT: f64 = 0.1;
/// Largest accuracy drop tolerated for APH against the plain model.
pub const APH_ACCURACY_SLACK: f64 = 0.02;
/// Default label-skew for suites that compare methods on non-IID data.
pub const DEFAULT_SKEW_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    HeterogeneitySweep,
    ParticipationSweep,
    EpochSweep,
    QuantitySweep,
    AphComparison,
    HeadFinetuneDiagnostic,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::HeterogeneitySweep,
        Suite::ParticipationSweep,
        Suite::EpochSweep,
        Suite::QuantitySweep,
        Suite::AphComparison,
        Suite::HeadFinetuneDiagnostic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::HeterogeneitySweep => "heterogeneity_sweep",
            Suite::ParticipationSweep => "participation_sweep",
            Suite::EpochSweep => "epoch_sweep",
            Suite::QuantitySweep => "quantity_sweep",
            Suite::AphComparison => "aph_comparison",
            Suite::HeadFinetuneDiagnostic => "head_finetune_diagnostic",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::UnknownSuite(s.to_string()))
    }
}

impl std::fmt::Display for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One (condition, seed) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub condition: String,
    pub seed: u64,
    pub accuracy: f64,
    pub f_ece: f64,
    pub nll: f64,
    pub entropy: f64,
    pub ood_entropy: Option<f64>,
}

impl SuiteRow {
    fn from_eval(condition: &str, seed: u64, e: &Evaluation) -> Self {
        SuiteRow {
            condition: condition.to_string(),
            seed,
            accuracy: e.calibration.accuracy,
            f_ece: e.calibration.f_ece,
            nll: e.calibration.nll,
            entropy: e.calibration.entropy.mean,
            ood_entropy: e.ood.as_ref().map(|o| o.entropy.mean),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub seeds: usize,
    pub accuracy: MeanStd,
    pub f_ece: MeanStd,
    pub nll: MeanStd,
    pub ood_entropy: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub gating: bool,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub rows: Vec<SuiteRow>,
    pub summary: Vec<ConditionSummary>,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    /// True when every gating check passed.
    pub fn passed(&self) -> bool {
        self.checks.iter().filter(|c| c.gating).all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn rows_for<'a>(&'a self, condition: &'a str) -> impl Iterator<Item = &'a SuiteRow> + 'a {
        self.rows.iter().filter(move |r| r.condition == condition)
    }

    /// Human-readable table: per-seed rows, then mean ± std, then checks.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "suite {} (seeds {:?})", self.suite, self.seeds);
        let _ = writeln!(
            s,
            "{:<28} {:>6} {:>9} {:>9} {:>9} {:>9}",
            "condition", "seed", "acc", "f_ece", "nll", "ood_H"
        );
        for r in &self.rows {
            let ood = r.ood_entropy.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                s,
                "{:<28} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9}",
                r.condition, r.seed, r.accuracy, r.f_ece, r.nll, ood
            );
        }
        let _ = writeln!(s);
        for c in &self.summary {
            let ood = c.ood_entropy.map_or("-".to_string(), |v| v.to_string());
            let _ = writeln!(
                s,
                "{:<28} acc {}  f_ece {}  nll {}  ood_H {}",
                c.condition, c.accuracy, c.f_ece, c.nll, ood
            );
        }
        let _ = writeln!(s);
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            let gate = if c.gating { "" } else { " (informational)" };
            let _ = writeln!(s, "[{tag}] {}{gate}: {}", c.name, c.detail);
        }
        s
    }

    /// Writes `rows.csv`, `summary.csv` and `report.json` into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rows = dir.join("rows.csv");
        {
            let f = std::fs::File::create(&rows).map_err(|e| Error::io(&rows, e))?;
            let mut w = csv::Writer::from_writer(f);
            w.write_record([
                "condition",
                "seed",
                "accuracy",
                "f_ece",
                "nll",
                "entropy",
                "ood_entropy",
            ])?;
            for r in &self.rows {
                w.write_record([
                    r.condition.clone(),
                    r.seed.to_string(),
                    r.accuracy.to_string(),
                    r.f_ece.to_string(),
                    r.nll.to_string(),
                    r.entropy.to_string(),
                    r.ood_entropy.map_or(String::new(), |v| v.to_string()),
                ])?;
            }
            w.flush().map_err(|e| Error::io(&rows, e))?;
        }
        let summary = dir.join("summary.csv");
        {
            let f = std::fs::File::create(&summary).map_err(|e| Error::io(&summary, e))?;
            let mut w = csv::Writer::from_writer(f);
            w.write_record([
                "condition",
                "seeds",
                "accuracy_mean",
                "accuracy_std",
                "f_ece_mean",
                "f_ece_std",
                "nll_mean",
                "nll_std",
                "ood_entropy_mean",
                "ood_entropy_std",
            ])?;
            for c in &self.summary {
                let (om, os) = c.ood_entropy.map_or((String::new(), String::new()), |o| {
                    (o.mean.to_string(), o.std.to_string())
                });
                w.write_record([
                    c.condition.clone(),
                    c.seeds.to_string(),
                    c.accuracy.mean.to_string(),
                    c.accuracy.std.to_string(),
                    c.f_ece.mean.to_string(),
                    c.f_ece.std.to_string(),
                    c.nll.mean.to_string(),
                    c.nll.std.to_string(),
                    om,
                    os,
                ])?;
            }
            w.flush().map_err(|e| Error::io(&summary, e))?;
        }
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        Ok(vec![rows, summary, json])
    }
}

fn summarize(rows: &[SuiteRow]) -> Vec<ConditionSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.condition.as_str()) {
            order.push(&r.condition);
        }
    }
    order
        .into_iter()
        .map(|cond| {
            let rs: Vec<&SuiteRow> = rows.iter().filter(|r| r.condition == cond).collect();
            let col = |f: fn(&SuiteRow) -> f64| MeanStd::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let ood: Option<Vec<f64>> = rs.iter().map(|r| r.ood_entropy).collect();
            ConditionSummary {
                condition: cond.to_string(),
                seeds: rs.len(),
                accuracy: col(|r| r.accuracy),
                f_ece: col(|r| r.f_ece),
                nll: col(|r| r.nll),
                ood_entropy: ood.map(|v| MeanStd::of(&v)),
            }
        })
        .collect()
}

/// Smallest count that is at least 80% of `n` ("4 of 5").
pub fn majority(n: usize) -> usize {
    (4 * n).div_ceil(5)
}

/// Per-seed paired comparison `pred(a, b)` between two conditions.
fn paired_check(
    rows: &[SuiteRow],
    name: &str,
    a: &str,
    b: &str,
    what: &str,
    pred: impl Fn(&SuiteRow, &SuiteRow) -> bool,
) -> Check {
    let mut hits = 0;
    let mut total = 0;
    for ra in rows.iter().filter(|r| r.condition == a) {
        if let Some(rb) = rows.iter().find(|r| r.condition == b && r.seed == ra.seed) {
            total += 1;
            hits += pred(ra, rb) as usize;
        }
    }
    let need = majority(total);
    Check {
        name: name.to_string(),
        gating: true,
        passed: total > 0 && hits >= need,
        detail: format!("{what} in {hits}/{total} seeds (need {need})"),
    }
}

/// Max-min of per-condition mean F-ECE against `2 x` pooled per-condition seed std.
pub fn neutrality_check(name: &str, gating: bool, summary: &[ConditionSummary]) -> Check {
    let means: Vec<f64> = summary.iter().map(|c| c.f_ece.mean).collect();
    let spread =
        means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - means.iter().cloned().fold(f64::INFINITY, f64::min);
    let pooled = (summary.iter().map(|c| c.f_ece.std * c.f_ece.std).sum::<f64>() / summary.len().max(1) as f64).sqrt();
    Check {
        name: name.to_string(),
        gating,
        passed: spread <= 2.0 * pooled,
        detail: format!("F-ECE spread {spread:.5} vs band 2 x {pooled:.5} = {:.5}", 2.0 * pooled),
    }
}

fn with_seed(base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg
}

fn skewed(base: &ExperimentConfig) -> ExperimentConfig {
    let mut cfg = base.clone();
    if cfg.data.alpha.is_none() {
        cfg.data.alpha = Some(DEFAULT_SKEW_ALPHA);
        cfg.data.quantity_proportions = None;
    }
    if cfg.aph.is_none() {
        cfg.aph = Some(Default::default());
    }
    cfg
}

fn iid(base: &ExperimentConfig) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.data.alpha = None;
    cfg.data.quantity_proportions = None;
    cfg
}

/// Train and evaluate the global model of one configuration.
fn plain_row(cfg: &ExperimentConfig, condition: &str) -> Result<SuiteRow> {
    let prep = pipeline::prepare(cfg)?;
    let result = pipeline::train(cfg, &prep)?;
    let e = pipeline::evaluate_global(cfg, &prep.spec, &result.global, &prep.clients, prep.ood.as_ref())?;
    Ok(SuiteRow::from_eval(condition, cfg.seed, &e))
}

/// Run every `(condition, config)` for every seed; rows come out condition-major.
fn sweep(seeds: &[u64], conditions: &[(String, ExperimentConfig)]) -> Result<Vec<SuiteRow>> {
    for (_, c) in conditions {
        c.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..conditions.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    jobs.par_iter()
        .map(|&(i, s)| plain_row(&with_seed(&conditions[i].1, s), &conditions[i].0))
        .collect()
}

fn fmt_alpha(a: Option<f64>) -> String {
    a.map_or("iid".to_string(), |a| format!("alpha={a}"))
}

/// Quantity-skew proportions: uniform, linear ramp and geometric halving.
pub fn quantity_profiles(clients: usize) -> Vec<(String, Vec<f64>)> {
    let norm = |w: Vec<f64>| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    vec![
        ("uniform".into(), norm(vec![1.0; clients])),
        ("linear".into(), norm((1..=clients).map(|i| i as f64).collect())),
        (
            "geometric".into(),
            norm((0..clients).map(|i| 0.5f64.powi(i as i32)).collect()),
        ),
    ]
}

/// Outcome of one APH-suite seed: the evaluated models plus the ensembles.
struct AphSeed {
    rows: Vec<SuiteRow>,
    jensen_inputs: usize,
    jensen_violations: usize,
    jensen_worst: f64,
}

/// Count inputs where `H(mean_m p_m) < mean_m H(p_m) - JENSEN_SLACK`.
pub fn jensen_violations(ensemble: &HeadEnsemble, inputs: &crate::nn::Matrix) -> Result<(usize, usize, f64)> {
    let per_head = ensemble.per_head_probs(inputs)?;
    let m = per_head.len() as f64;
    let k = inputs_cols(&per_head);
    let mut bad = 0;
    let mut worst = f64::INFINITY;
    let mut avg = vec![0.0; k];
    for i in 0..inputs.rows() {
        avg.iter_mut().for_each(|v| *v = 0.0);
        let mut mean_h = 0.0;
        for p in &per_head {
            let row = p.row(i);
            for (a, v) in avg.iter_mut().zip(row) {
                *a += v / m;
            }
            mean_h += entropy(row) / m;
        }
        let gap = entropy(&avg) - mean_h;
        worst = worst.min(gap);
        if gap < -JENSEN_SLACK {
            bad += 1;
        }
    }
    Ok((inputs.rows(), bad, worst))
}

fn inputs_cols(ms: &[crate::nn::Matrix]) -> usize {
    ms.first().map_or(0, |m| m.cols())
}

fn aph_seed(cfg: &ExperimentConfig, grid: bool) -> Result<AphSeed> {
    let prep = pipeline::prepare(cfg)?;
    let result = pipeline::train(cfg, &prep)?;
    let ood = prep.ood.as_ref();
    let seed = cfg.seed;
    let mut rows = Vec::new();

    let plain = pipeline::evaluate_global(cfg, &prep.spec, &result.global, &prep.clients, ood)?;
    rows.push(SuiteRow::from_eval("fedavg", seed, &plain));

    let tuned = fed::finetune_heads(
        &prep.spec,
        &result.global,
        &prep.clients,
        &pipeline::finetune_options(cfg),
    )?;
    let ft = pipeline::evaluate_params(cfg, "finetune", &prep.spec, &tuned, &prep.clients, ood)?;
    rows.push(SuiteRow::from_eval("fedavg+finetune", seed, &ft));

    let ensembles = pipeline::build_ensembles(cfg, &prep.spec, &result, &prep.clients, None)?;
    let a = pipeline::evaluate_ensembles(cfg, "aph", &ensembles, &prep.clients, ood)?;
    rows.push(SuiteRow::from_eval("fedavg+aph", seed, &a));

    let (mut inputs, mut violations, mut worst) = (0, 0, f64::INFINITY);
    for (e, c) in ensembles.iter().zip(&prep.clients) {
        for x in [Some(&c.test.inputs), ood.map(|o| &o.inputs)].into_iter().flatten() {
            let (n, bad, w) = jensen_violations(e, x)?;
            inputs += n;
            violations += bad;
            worst = worst.min(w);
        }
    }

    if grid {
        let aph_cfg = cfg.aph.as_ref().expect("skewed() installs an aph section");
        let mu_offsets = aph::lambda_grid(0.0);
        for off in mu_offsets {
            for bu in BETA_HIGH_GRID {
                if bu < aph_cfg.beta_low {
                    continue;
                }
                let point = AphPoint {
                    lambda: None,
                    lambda_offset: off,
                    beta_high: bu,
                };
                let name = format!("aph[mu{off:+},bu={bu}]");
                let ens = pipeline::build_ensembles(cfg, &prep.spec, &result, &prep.clients, Some(point))?;
                let e = pipeline::evaluate_ensembles(cfg, &name, &ens, &prep.clients, ood)?;
                rows.push(SuiteRow::from_eval(&name, seed, &e));
            }
        }
    }
    Ok(AphSeed {
        rows,
        jensen_inputs: inputs,
        jensen_violations: violations,
        jensen_worst: worst,
    })
}

fn aph_suite(base: &ExperimentConfig, seeds: &[u64], grid: bool) -> Result<(Vec<SuiteRow>, Check)> {
    let cfg = skewed(base);
    cfg.validate()?;
    let per_seed: Vec<AphSeed> = seeds
        .par_iter()
        .map(|&s| aph_seed(&with_seed(&cfg, s), grid))
        .collect::<Result<_>>()?;
    let inputs: usize = per_seed.iter().map(|s| s.jensen_inputs).sum();
    let bad: usize = per_seed.iter().map(|s| s.jensen_violations).sum();
    let worst = per_seed.iter().map(|s| s.jensen_worst).fold(f64::INFINITY, f64::min);
    let jensen = Check {
        name: "jensen_entropy".into(),
        gating: true,
        passed: bad == 0 && inputs > 0,
        detail: format!("{bad} violations over {inputs} ensemble inputs (min gap {worst:.3e}, slack {JENSEN_SLACK:e})"),
    };
    let mut rows: Vec<SuiteRow> = per_seed.into_iter().flat_map(|s| s.rows).collect();
    // condition-major, seed order within a condition
    let order: Vec<String> = {
        let mut o: Vec<String> = Vec::new();
        for r in &rows {
            if !o.contains(&r.condition) {
                o.push(r.condition.clone());
            }
        }
        o
    };
    rows.sort_by_key(|r| order.iter().position(|c| *c == r.condition));
    Ok((rows, jensen))
}

fn ood_gt(a: &SuiteRow, b: &SuiteRow) -> bool {
    matches!((a.ood_entropy, b.ood_entropy), (Some(x), Some(y)) if x > y)
}

/// Run `suite` over `seeds`, starting from `base` (its own seed is ignored).
pub fn run_suite(suite: Suite, base: &ExperimentConfig, seeds: &[u64]) -> Result<SuiteReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("suite needs at least one seed".into()));
    }
    base.validate()?;
    let (rows, mut checks) = match suite {
        Suite::HeterogeneitySweep => {
            let conds: Vec<(String, ExperimentConfig)> = [Some(0.05), Some(0.1), Some(0.5), None]
                .into_iter()
                .map(|a| {
                    let mut c = iid(base);
                    c.data.alpha = a;
                    (fmt_alpha(a), c)
                })
                .collect();
            let rows = sweep(seeds, &conds)?;
            let check = paired_check(
                &rows,
                "noniid_harms_calibration",
                "alpha=0.1",
                "iid",
                "F-ECE(alpha=0.1) > F-ECE(iid)",
                |a, b| a.f_ece > b.f_ece,
            );
            (rows, vec![check])
        }
        Suite::ParticipationSweep => {
            let conds: Vec<(String, ExperimentConfig)> = [0.25, 0.5, 1.0]
                .into_iter()
                .map(|g| {
                    let mut c = iid(base);
                    c.fed.participation = g;
                    (format!("gamma={g}"), c)
                })
                .collect();
            let rows = sweep(seeds, &conds)?;
            (rows, Vec::new())
        }
        Suite::EpochSweep => {
            let conds: Vec<(String, ExperimentConfig)> = [1usize, 5, 10, 20]
                .into_iter()
                .map(|e| {
                    let mut c = base.clone();
                    c.fed.local_epochs = e;
                    (format!("epochs={e}"), c)
                })
                .collect();
            let rows = sweep(seeds, &conds)?;
            (rows, Vec::new())
        }
        Suite::QuantitySweep => {
            let conds: Vec<(String, ExperimentConfig)> = quantity_profiles(base.fed.clients)
                .into_iter()
                .map(|(name, p)| {
                    let mut c = base.clone();
                    c.data.alpha = None;
                    c.data.quantity_proportions = Some(p);
                    (format!("quantity={name}"), c)
                })
                .collect();
            let rows = sweep(seeds, &conds)?;
            (rows, Vec::new())
        }
        Suite::AphComparison => {
            let (rows, jensen) = aph_suite(base, seeds, true)?;
            let improve = paired_check(
                &rows,
                "aph_improves_reliability",
                "fedavg+aph",
                "fedavg",
                "APH F-ECE lower and accuracy within 0.02",
                |a, p| a.f_ece < p.f_ece && a.accuracy >= p.accuracy - APH_ACCURACY_SLACK,
            );
            let ood = paired_check(
                &rows,
                "aph_raises_ood_entropy",
                "fedavg+aph",
                "fedavg",
                "APH OOD entropy > plain",
                ood_gt,
            );
            (rows, vec![improve, ood, jensen])
        }
        Suite::HeadFinetuneDiagnostic => {
            let (rows, jensen) = aph_suite(base, seeds, false)?;
            let lowers = paired_check(
                &rows,
                "finetune_lowers_f_ece",
                "fedavg+finetune",
                "fedavg",
                "fine-tuned F-ECE < plain",
                |a, b| a.f_ece < b.f_ece,
            );
            let shift = paired_check(
                &rows,
                "finetune_keeps_ood_entropy",
                "fedavg+finetune",
                "fedavg",
                "|OOD entropy change| < 0.1 nats",
                |a, b| matches!((a.ood_entropy, b.ood_entropy), (Some(x), Some(y)) if (x - y).abs() < FINETUNE_OOD_SHIFT),
            );
            let ood = paired_check(
                &rows,
                "aph_raises_ood_entropy",
                "fedavg+aph",
                "fedavg",
                "APH OOD entropy > plain",
                ood_gt,
            );
            let mut jensen = jensen;
            jensen.gating = false;
            (rows, vec![lowers, shift, ood, jensen])
        }
    };
    let summary = summarize(&rows);
    match suite {
        Suite::ParticipationSweep => checks.push(neutrality_check("iid_participation_neutral", true, &summary)),
        Suite::EpochSweep => checks.push(neutrality_check("local_epochs_trivial", false, &summary)),
        Suite::QuantitySweep => checks.push(neutrality_check("quantity_skew_trivial", false, &summary)),
        _ => {}
    }
    Ok(SuiteReport {
        suite,
        seeds: seeds.to_vec(),
        config_hash: base.hash(),
        rows,
        summary,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!(matches!("nope".parse::<Suite>(), Err(Error::UnknownSuite(_))));
    }

    #[test]
    fn majority_is_four_of_five() {
        assert_eq!(majority(5), 4);
        assert_eq!(majority(10), 8);
        assert_eq!(majority(1), 1);
        assert_eq!(majority(3), 3);
    }

    #[test]
    fn mean_std_uses_sample_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.std, 1.0);
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }

    #[test]
    fn quantity_profiles_sum_to_one() {
        for (_, p) in quantity_profiles(8) {
            assert_eq!(p.len(), 8);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn neutrality_band() {
        let row = |c: &str, f: f64| ConditionSummary {
            condition: c.into(),
            seeds: 5,
            accuracy: MeanStd { mean: 1.0, std: 0.0 },
            f_ece: MeanStd { mean: f, std: 0.01 },
            nll: MeanStd { mean: 0.0, std: 0.0 },
            ood_entropy: None,
        };
        assert!(neutrality_check("x", true, &[row("a", 0.10), row("b", 0.115)]).passed);
        assert!(!neutrality_check("x", true, &[row("a", 0.10), row("b", 0.125)]).passed);
    }
}
