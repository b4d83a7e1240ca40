//! Persisted runs: the on-disk layout and the gen-data / train / aph / evaluate commands.
//!
//! ```text
//! <out>/config.toml                 canonical copy of the config
//! <out>/data/dataset.fbin           pooled dataset
//! <out>/data/partition.csv          client,class,train,test label histograms
//! <out>/data/client_NNN_{train,test}.fbin
//! <out>/data/ood.fbin               (when the config has an OOD section)
//! <out>/train/rounds.jsonl          one record per completed round
//! <out>/train/state.fbin            resumable federation state, rewritten each round
//! <out>/train/global.fbin           final global model
//! <out>/aph/client_NNN.fbin         one head ensemble per client
//! <out>/aph/betas.csv               client,head,beta audit trail
//! <out>/reports/<model>_in_domain.json / _bins.csv / _entropy.csv
//! <out>/reports/<model>_ood.json / _entropy.csv
//! <out>/suites/<suite>/rows.csv / summary.csv / report.json
//! <out>/manifest.json               hashes, artifacts, FLOP totals (deterministic)
//! <out>/manifest_timing.json        wall-clock timestamps (not reproducible)
//! ```
//!
//! All writes for a run happen on the calling thread, so log order is fixed.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, PriorSource};
use super::pipeline::{self, Prepared};
use super::suite::{self, Suite, SuiteReport};
use crate::aph::{CostModel, HeadEnsemble};
use crate::checkpoint::{self, Container};
use crate::data::{ClientData, Dataset};
use crate::error::{Error, Result};
use crate::fed::{self, Federation, FederationResult, RoundLog};
use crate::nn::{ModelParams, ModelSpec};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "FEDREL_OUT";

/// Paths inside one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("data/dataset.fbin")
    }
    pub fn partition_csv(&self) -> PathBuf {
        self.root.join("data/partition.csv")
    }
    pub fn client_train(&self, c: usize) -> PathBuf {
        self.root.join(format!("data/client_{c:03}_train.fbin"))
    }
    pub fn client_test(&self, c: usize) -> PathBuf {
        self.root.join(format!("data/client_{c:03}_test.fbin"))
    }
    pub fn ood(&self) -> PathBuf {
        self.root.join("data/ood.fbin")
    }
    pub fn rounds_log(&self) -> PathBuf {
        self.root.join("train/rounds.jsonl")
    }
    pub fn state(&self) -> PathBuf {
        self.root.join("train/state.fbin")
    }
    pub fn global_model(&self) -> PathBuf {
        self.root.join("train/global.fbin")
    }
    pub fn ensemble(&self, c: usize) -> PathBuf {
        self.root.join(format!("aph/client_{c:03}.fbin"))
    }
    pub fn betas_csv(&self) -> PathBuf {
        self.root.join("aph/betas.csv")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn suite_dir(&self, s: Suite) -> PathBuf {
        self.root.join("suites").join(s.name())
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn timing(&self) -> PathBuf {
        self.root.join("manifest_timing.json")
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }
}

/// Output root: explicit flag (or [`OUT_ENV`]), then the config's `output_dir`, then `./runs`.
pub fn resolve_out(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Deterministic part of the run manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    /// Artifact paths relative to the run directory, per command.
    pub artifacts: BTreeMap<String, Vec<String>>,
    /// Estimated floating-point operations per command.
    pub flops: BTreeMap<String, f64>,
}

/// Non-reproducible part: when each command ran and for how long.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub commands: BTreeMap<String, CommandTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandTiming {
    pub started_unix: u64,
    pub wall_seconds: f64,
    pub host: String,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Option<Self>> {
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// Paths listed for any command that do not exist under `root`.
    pub fn missing(&self, root: &Path) -> Vec<String> {
        self.artifacts
            .values()
            .flatten()
            .filter(|p| !root.join(p).exists())
            .cloned()
            .collect()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_container(path: &Path, c: &Container) -> Result<()> {
    write_atomic(path, &c.to_bytes()?)
}

fn read_container(path: &Path, what: &'static str) -> Result<Container> {
    if !path.exists() {
        return Err(Error::MissingInput {
            path: path.to_path_buf(),
            what,
        });
    }
    Container::read(path)
}

/// Records one command's artifacts in both manifest files.
fn record(
    run: &RunDir,
    cfg: &ExperimentConfig,
    command: &str,
    paths: &[PathBuf],
    flops: f64,
    started: (SystemTime, Instant),
) -> Result<()> {
    let hash = cfg.hash();
    let mut m = RunManifest::load(&run.manifest())?.unwrap_or_default();
    if m.config_hash != hash {
        // a different config owns this directory now; earlier entries are stale
        m = RunManifest::default();
    }
    m.tool_version = TOOL_VERSION.to_string();
    m.config_hash = hash;
    let mut rel: Vec<String> = paths.iter().map(|p| run.rel(p)).collect();
    rel.sort();
    rel.dedup();
    m.artifacts.insert(command.to_string(), rel);
    m.flops.insert(command.to_string(), flops);
    write_atomic(&run.manifest(), serde_json::to_string_pretty(&m)?.as_bytes())?;

    let mut t: RunTiming = if run.timing().exists() {
        let text = std::fs::read_to_string(run.timing()).map_err(|e| Error::io(run.timing(), e))?;
        serde_json::from_str(&text).unwrap_or_default()
    } else {
        RunTiming::default()
    };
    t.commands.insert(
        command.to_string(),
        CommandTiming {
            started_unix: started.0.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_seconds: started.1.elapsed().as_secs_f64(),
            host: std::env::var("HOSTNAME").unwrap_or_default(),
        },
    );
    write_atomic(&run.timing(), serde_json::to_string_pretty(&t)?.as_bytes())
}

fn now() -> (SystemTime, Instant) {
    (SystemTime::now(), Instant::now())
}

/// Forward FLOPs for one sample; a training step is counted as three forwards.
fn forward_flops(spec: &ModelSpec) -> f64 {
    let c = CostModel::from_spec(spec);
    c.extractor_flops + c.head_flops
}

/// Writes the canonical config, or checks an existing one has the same hash.
fn pin_config(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let path = run.config();
    if path.exists() {
        let existing = ExperimentConfig::load(&path)?;
        if existing.hash() != cfg.hash() {
            return Err(Error::config(
                path.display().to_string(),
                "run directory was created with a different config; use a fresh --out",
            ));
        }
        return Ok(());
    }
    write_atomic(&path, cfg.to_toml().as_bytes())
}

pub fn gen_data(cfg: &ExperimentConfig, run: &RunDir) -> Result<Vec<PathBuf>> {
    let started = now();
    cfg.validate()?;
    pin_config(run, cfg)?;
    let prep = pipeline::prepare(cfg)?;
    let mut paths = vec![run.config()];
    write_container(&run.dataset(), &prep.dataset.to_container())?;
    paths.push(run.dataset());
    for c in &prep.clients {
        write_container(&run.client_train(c.client_id), &c.train.to_container())?;
        write_container(&run.client_test(c.client_id), &c.test.to_container())?;
        paths.push(run.client_train(c.client_id));
        paths.push(run.client_test(c.client_id));
    }
    if let Some(o) = &prep.ood {
        write_container(&run.ood(), &o.to_container())?;
        paths.push(run.ood());
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["client", "class", "train", "test"])?;
    for c in &prep.clients {
        let (tr, te) = (c.train.class_counts(), c.test.class_counts());
        for k in 0..prep.dataset.classes {
            w.write_record([
                c.client_id.to_string(),
                k.to_string(),
                tr[k].to_string(),
                te[k].to_string(),
            ])?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(run.partition_csv(), e.into_error()))?;
    write_atomic(&run.partition_csv(), &bytes)?;
    paths.push(run.partition_csv());
    record(run, cfg, "gen-data", &paths, 0.0, started)?;
    Ok(paths)
}

/// Reads back what [`gen_data`] wrote.
pub fn load_prepared(cfg: &ExperimentConfig, run: &RunDir) -> Result<Prepared> {
    let spec = cfg.model_spec()?;
    let dataset = Dataset::from_container(&read_container(&run.dataset(), "dataset (run gen-data first)")?)?;
    let mut clients = Vec::with_capacity(cfg.fed.clients);
    for c in 0..cfg.fed.clients {
        clients.push(ClientData {
            client_id: c,
            train: Dataset::from_container(&read_container(
                &run.client_train(c),
                "client train split (run gen-data first)",
            )?)?,
            test: Dataset::from_container(&read_container(
                &run.client_test(c),
                "client test split (run gen-data first)",
            )?)?,
        });
    }
    let ood = if cfg.data.ood.is_some() {
        Some(Dataset::from_container(&read_container(
            &run.ood(),
            "OOD set (run gen-data first)",
        )?)?)
    } else {
        None
    };
    Ok(Prepared {
        spec,
        dataset,
        partitions: Vec::new(),
        clients,
        ood,
    })
}

pub fn state_container(spec: &ModelSpec, state: &FederationResult, cfg_hash: &str) -> Result<Container> {
    let mut c = Container::new("federation");
    c.set("spec", spec.encode())
        .set("config_hash", cfg_hash)
        .set("rounds_completed", state.logs.len())
        .set("clients", state.locals.len())
        .set("logs", serde_json::to_string(&state.logs)?);
    let has_local: Vec<String> = state
        .locals
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_some())
        .map(|(i, _)| i.to_string())
        .collect();
    c.set("locals", has_local.join(","));
    checkpoint::push_params(&mut c, "global.", &state.global);
    for (i, l) in state.locals.iter().enumerate() {
        if let Some(p) = l {
            checkpoint::push_params(&mut c, &format!("local{i}."), p);
        }
    }
    Ok(c)
}

pub fn read_state(c: &Container) -> Result<(ModelSpec, FederationResult, String)> {
    c.expect_kind("federation")?;
    let spec = ModelSpec::decode(c.require("spec")?)?;
    let clients: usize = c.parse_field("clients")?;
    let logs: Vec<RoundLog> = serde_json::from_str(c.require("logs")?)?;
    let global = checkpoint::take_params(c, "global.", &spec)?;
    let mut locals = vec![None; clients];
    for id in c.require("locals")?.split(',').filter(|s| !s.is_empty()) {
        let i: usize = id
            .parse()
            .map_err(|_| Error::Format(format!("bad local index '{id}'")))?;
        if i >= clients {
            return Err(Error::Format(format!("local index {i} out of range")));
        }
        locals[i] = Some(checkpoint::take_params(c, &format!("local{i}."), &spec)?);
    }
    Ok((
        spec,
        FederationResult { global, locals, logs },
        c.require("config_hash")?.to_string(),
    ))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Continue from `train/state.fbin` when present.
    pub resume: bool,
    /// Stop once this many rounds are complete (simulated interruption).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub result: FederationResult,
    pub finished: bool,
}

pub fn train(cfg: &ExperimentConfig, run: &RunDir, opts: TrainOptions) -> Result<TrainOutcome> {
    let started = now();
    cfg.validate()?;
    pin_config(run, cfg)?;
    let prep = load_prepared(cfg, run)?;
    let fcfg = cfg.fed_config();
    let hash = cfg.hash();

    let state = if opts.resume && run.state().exists() {
        let (spec, state, h) = read_state(&Container::read(&run.state())?)?;
        if h != hash || spec != prep.spec {
            return Err(Error::config(
                run.state().display().to_string(),
                "saved state was produced by a different config",
            ));
        }
        Some(state)
    } else {
        None
    };
    let mut engine = match state {
        Some(s) => Federation::from_state(&prep.spec, &prep.clients, &fcfg, s)?,
        None => Federation::new(&prep.spec, &prep.clients, &fcfg)?,
    }
    .with_bins(cfg.metrics.bins);

    // the log always mirrors the state: rewrite what the state already covers
    let log_path = run.rounds_log();
    let mut log_text = String::new();
    for l in &engine.state().logs {
        log_text.push_str(&serde_json::to_string(l)?);
        log_text.push('\n');
    }
    write_atomic(&log_path, log_text.as_bytes())?;
    let mut log = std::fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    while !engine.is_done() && opts.stop_after.is_none_or(|n| engine.completed_rounds() < n) {
        let line = serde_json::to_string(engine.step()?)?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        write_container(&run.state(), &state_container(&prep.spec, engine.state(), &hash)?)?;
    }
    if engine.completed_rounds() == 0 {
        write_container(&run.state(), &state_container(&prep.spec, engine.state(), &hash)?)?;
    }
    let finished = engine.is_done();
    let result = engine.into_result();
    let mut paths = vec![run.config(), log_path, run.state()];
    if finished {
        let lineage = format!("config={hash};rounds={}", result.logs.len());
        write_container(
            &run.global_model(),
            &checkpoint::model_container(&prep.spec, &result.global, &lineage),
        )?;
        paths.push(run.global_model());
    }
    let sample_epochs: f64 = result
        .logs
        .iter()
        .flat_map(|l| &l.participants)
        .map(|&c| (prep.clients[c].train.len() * cfg.fed.local_epochs) as f64)
        .sum();
    record(
        run,
        cfg,
        "train",
        &paths,
        3.0 * forward_flops(&prep.spec) * sample_epochs,
        started,
    )?;
    Ok(TrainOutcome { result, finished })
}

/// Final training state, or an error naming what is missing.
pub fn load_trained(run: &RunDir) -> Result<(ModelSpec, FederationResult)> {
    let (spec, state, _) = read_state(&read_container(&run.state(), "training state (run train first)")?)?;
    if !run.global_model().exists() {
        return Err(Error::MissingInput {
            path: run.global_model(),
            what: "final global model (training has not finished)",
        });
    }
    Ok((spec, state))
}

/// Build and persist one ensemble per client.
///
/// `checkpoint` overrides the trained global model as the prior; client-local
/// priors are only available from a training state.
pub fn aph(cfg: &ExperimentConfig, run: &RunDir, checkpoint_path: Option<&Path>) -> Result<Vec<HeadEnsemble>> {
    let started = now();
    cfg.validate()?;
    pin_config(run, cfg)?;
    if cfg.aph.is_none() {
        return Err(Error::config("aph", "section required for the aph command"));
    }
    let prep = load_prepared(cfg, run)?;
    let result = match checkpoint_path {
        Some(p) => {
            let (spec, params) = checkpoint::read_model(&read_container(p, "model checkpoint")?)?;
            if spec != prep.spec {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint spec {spec} does not match config spec {}",
                    prep.spec
                )));
            }
            if cfg.aph.as_ref().is_some_and(|a| a.prior == PriorSource::Local) {
                return Err(Error::config(
                    "aph.prior",
                    "\"local\" needs the training state, not a single checkpoint",
                ));
            }
            FederationResult {
                global: params,
                locals: vec![None; cfg.fed.clients],
                logs: Vec::new(),
            }
        }
        None => load_trained(run)?.1,
    };
    let ensembles = pipeline::build_ensembles(cfg, &prep.spec, &result, &prep.clients, None)?;
    let mut paths = Vec::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["client", "head", "beta"])?;
    let mut flops = 0.0;
    for (c, e) in prep.clients.iter().zip(&ensembles) {
        write_container(&run.ensemble(c.client_id), &e.to_container())?;
        paths.push(run.ensemble(c.client_id));
        for (m, b) in e.betas.iter().enumerate() {
            w.write_record([c.client_id.to_string(), m.to_string(), b.to_string()])?;
        }
        flops += 3.0 * CostModel::from_spec(&prep.spec).head_flops * (e.len() * e.config.epochs * c.train.len()) as f64;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(run.betas_csv(), e.into_error()))?;
    write_atomic(&run.betas_csv(), &bytes)?;
    paths.push(run.betas_csv());
    record(run, cfg, "aph", &paths, flops, started)?;
    Ok(ensembles)
}

pub fn load_ensembles(cfg: &ExperimentConfig, run: &RunDir) -> Result<Vec<HeadEnsemble>> {
    (0..cfg.fed.clients)
        .map(|c| HeadEnsemble::from_container(&read_container(&run.ensemble(c), "head ensemble (run aph first)")?))
        .collect()
}

/// Which model families [`evaluate`] reports on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalTarget {
    /// Global model, its fine-tuned heads, and the ensembles when present.
    #[default]
    All,
    Global,
    Finetune,
    Aph,
}

/// Evaluate trained artifacts. `model` replaces the trained global model with a checkpoint file.
pub fn evaluate(
    cfg: &ExperimentConfig,
    run: &RunDir,
    target: EvalTarget,
    model: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    let started = now();
    cfg.validate()?;
    pin_config(run, cfg)?;
    let prep = load_prepared(cfg, run)?;
    let ood = prep.ood.as_ref();
    let global: Option<ModelParams> = match (target, model) {
        (EvalTarget::Aph, _) => None,
        (_, Some(p)) => {
            let (spec, params) = checkpoint::read_model(&read_container(p, "model checkpoint")?)?;
            if spec != prep.spec {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint spec {spec} does not match config spec {}",
                    prep.spec
                )));
            }
            Some(params)
        }
        (_, None) => Some(load_trained(run)?.1.global),
    };
    let dir = run.reports();
    let mut paths = Vec::new();
    let mut flops = 0.0;
    let eval_samples: usize = prep
        .clients
        .iter()
        .map(|c| c.test.len() + ood.map_or(0, |o| o.len()))
        .sum();
    let mut emit = |name: &str, e: pipeline::Evaluation, per_sample: f64| -> Result<()> {
        paths.extend(e.calibration.write_files(&dir, &format!("{name}_in_domain"))?);
        if let Some(o) = e.ood {
            paths.extend(o.write_files(&dir, &format!("{name}_ood"))?);
        }
        flops += per_sample * eval_samples as f64;
        Ok(())
    };
    let fwd = forward_flops(&prep.spec);
    if let Some(g) = &global {
        if matches!(target, EvalTarget::All | EvalTarget::Global) {
            emit(
                "global",
                pipeline::evaluate_global(cfg, &prep.spec, g, &prep.clients, ood)?,
                fwd,
            )?;
        }
        if matches!(target, EvalTarget::All | EvalTarget::Finetune) {
            let tuned = fed::finetune_heads(&prep.spec, g, &prep.clients, &pipeline::finetune_options(cfg))?;
            emit(
                "finetune",
                pipeline::evaluate_params(cfg, "finetune", &prep.spec, &tuned, &prep.clients, ood)?,
                fwd,
            )?;
        }
    }
    let want_aph = match target {
        EvalTarget::Aph => true,
        EvalTarget::All => (0..cfg.fed.clients).all(|c| run.ensemble(c).exists()),
        _ => false,
    };
    if want_aph {
        let ens = load_ensembles(cfg, run)?;
        let cost = CostModel::from_spec(&prep.spec);
        let per = cost.extractor_flops + ens.first().map_or(0, |e| e.len()) as f64 * cost.head_flops;
        emit(
            "aph",
            pipeline::evaluate_ensembles(cfg, "aph", &ens, &prep.clients, ood)?,
            per,
        )?;
    }
    record(run, cfg, "evaluate", &paths, flops, started)?;
    Ok(paths)
}

/// Run a suite and write its tables under `<out>/suites/<suite>/`.
pub fn run_suite(cfg: &ExperimentConfig, run: &RunDir, s: Suite, seeds: &[u64]) -> Result<(SuiteReport, Vec<PathBuf>)> {
    let started = now();
    let report = suite::run_suite(s, cfg, seeds)?;
    let paths = report.write_files(&run.suite_dir(s))?;
    record(run, cfg, &format!("suite:{s}"), &paths, 0.0, started)?;
    Ok((report, paths))
}
