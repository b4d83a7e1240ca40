//! In-memory experiment stages shared by the CLI commands and the suites.

use rayon::prelude::*;

use super::config::{DataSource, ExperimentConfig, PriorSource};
use crate::aph::{self, AphConfig, HeadEnsemble};
use crate::data::{self, ClientData, ClientPartition, Dataset, PartitionPlan};
use crate::error::{Error, Result};
use crate::eval::{self, Predictor, Single};
use crate::fed::{self, FederationResult, FinetuneOptions};
use crate::metrics::{CalibrationReport, OodReport};
use crate::nn::{ModelParams, ModelSpec};

/// Pooled dataset, its partition and the derived client splits.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: ModelSpec,
    pub dataset: Dataset,
    pub partitions: Vec<ClientPartition>,
    pub clients: Vec<ClientData>,
    pub ood: Option<Dataset>,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => data::gen_synthetic(
            d.classes,
            d.dim,
            d.samples_per_class,
            d.class_separation,
            cfg.stream_seed("data"),
        ),
        DataSource::Cifar10 => {
            let path = d.path.as_ref().ok_or_else(|| Error::config("data.path", "missing"))?;
            data::load_cifar10_binary(path)
        }
    }
}

pub fn partition_plan(cfg: &ExperimentConfig) -> PartitionPlan {
    PartitionPlan {
        clients: cfg.fed.clients,
        alpha: cfg.data.alpha,
        quantity_skew: cfg.data.quantity_proportions.clone(),
        seed: cfg.stream_seed("partition"),
    }
}

/// Split partitions into per-client train/test sets.
pub fn split_clients(cfg: &ExperimentConfig, partitions: &[ClientPartition]) -> Result<Vec<ClientData>> {
    partitions
        .iter()
        .map(|p| data::train_test_split(p, cfg.data.test_fraction, cfg.stream_seed("split")))
        .collect()
}

pub fn make_ood(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Option<Dataset>> {
    cfg.data
        .ood
        .as_ref()
        .map(|o| data::gen_ood(dataset, o.mode, o.magnitude, cfg.stream_seed("ood")))
        .transpose()
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let spec = cfg.model_spec()?;
    let dataset = load_dataset(cfg)?;
    if dataset.dim() != spec.input_dim || dataset.classes != spec.classes() {
        return Err(Error::config(
            "data",
            format!(
                "dataset has dim {} and {} classes, config says {} and {}",
                dataset.dim(),
                dataset.classes,
                spec.input_dim,
                spec.classes()
            ),
        ));
    }
    let partitions = data::partition(&dataset, &partition_plan(cfg))?;
    let clients = split_clients(cfg, &partitions)?;
    let ood = make_ood(cfg, &dataset)?;
    Ok(Prepared {
        spec,
        dataset,
        partitions,
        clients,
        ood,
    })
}

pub fn train(cfg: &ExperimentConfig, prep: &Prepared) -> Result<FederationResult> {
    fed::Federation::new(&prep.spec, &prep.clients, &cfg.fed_config())?
        .with_bins(cfg.metrics.bins)
        .run()
}

pub fn finetune_options(cfg: &ExperimentConfig) -> FinetuneOptions {
    FinetuneOptions {
        rounds: cfg.finetune.rounds,
        epochs_per_round: cfg.finetune.epochs_per_round,
        scope: cfg.finetune.scope.into(),
        lr: cfg.finetune.lr.unwrap_or(cfg.fed.lr),
        batch_size: cfg.fed.batch_size,
        seed: cfg.stream_seed("finetune"),
        bins: cfg.metrics.bins,
    }
}

/// APH settings for one client. `lambda` of `None` means "derived from the prior head".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AphPoint {
    pub lambda: Option<f64>,
    pub lambda_offset: f64,
    pub beta_high: f64,
}

/// One ensemble per client, each built on that client's training split.
pub fn build_ensembles(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    result: &FederationResult,
    clients: &[ClientData],
    point: Option<AphPoint>,
) -> Result<Vec<HeadEnsemble>> {
    let a = cfg
        .aph
        .as_ref()
        .ok_or_else(|| Error::config("aph", "section required for APH"))?;
    let point = point.unwrap_or(AphPoint {
        lambda: a.lambda,
        lambda_offset: a.lambda_offset,
        beta_high: a.beta_high,
    });
    clients
        .par_iter()
        .map(|c| {
            let (prior, source) = match a.prior {
                PriorSource::Global => (&result.global, "global".to_string()),
                PriorSource::Local => match &result.locals[c.client_id] {
                    Some(p) => (p, format!("local-{}", c.client_id)),
                    None => (&result.global, "global".to_string()),
                },
            };
            let lambda = match point.lambda {
                Some(l) => l,
                None => aph::default_lambda(&prior.head)? + point.lambda_offset,
            };
            let acfg = AphConfig {
                heads: a.heads,
                lambda,
                beta_low: a.beta_low,
                beta_high: point.beta_high,
                epochs: a.epochs,
                batch_size: cfg.fed.batch_size,
                averaging: a.averaging,
                seed: crate::seed::derive(cfg.seed, "aph", &[c.client_id as u64]),
            };
            aph::build_ensemble(spec, prior, &c.train, &acfg, &source)
        })
        .collect()
}

/// In-domain calibration plus optional OOD entropy for one model per client.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub calibration: CalibrationReport,
    pub ood: Option<OodReport>,
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    name: &str,
    models: &[&dyn Predictor],
    clients: &[ClientData],
    ood: Option<&Dataset>,
) -> Result<Evaluation> {
    let hash = cfg.hash();
    let sets = eval::test_sets(models, clients, name)?;
    let mut calibration = CalibrationReport::compute_with(name, &sets, cfg.metrics.bins, cfg.metrics.entropy_bins)?;
    calibration.config_hash = Some(hash.clone());
    let ood = match ood {
        Some(o) => {
            let ids: Vec<usize> = clients.iter().map(|c| c.client_id).collect();
            let mut r =
                OodReport::compute_with(name, &eval::ood_sets(models, &ids, o, name)?, cfg.metrics.entropy_bins);
            r.config_hash = Some(hash);
            Some(r)
        }
        None => None,
    };
    Ok(Evaluation { calibration, ood })
}

/// The global model, replicated for every client.
pub fn evaluate_global(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    global: &ModelParams,
    clients: &[ClientData],
    ood: Option<&Dataset>,
) -> Result<Evaluation> {
    let single = Single { spec, params: global };
    let models: Vec<&dyn Predictor> = vec![&single; clients.len()];
    evaluate(cfg, "fedavg", &models, clients, ood)
}

pub fn evaluate_params(
    cfg: &ExperimentConfig,
    name: &str,
    spec: &ModelSpec,
    params: &[ModelParams],
    clients: &[ClientData],
    ood: Option<&Dataset>,
) -> Result<Evaluation> {
    let singles: Vec<Single<'_>> = params.iter().map(|p| Single { spec, params: p }).collect();
    let models: Vec<&dyn Predictor> = singles.iter().map(|s| s as &dyn Predictor).collect();
    evaluate(cfg, name, &models, clients, ood)
}

pub fn evaluate_ensembles(
    cfg: &ExperimentConfig,
    name: &str,
    ensembles: &[HeadEnsemble],
    clients: &[ClientData],
    ood: Option<&Dataset>,
) -> Result<Evaluation> {
    let models: Vec<&dyn Predictor> = ensembles.iter().map(|e| e as &dyn Predictor).collect();
    evaluate(cfg, name, &models, clients, ood)
}
