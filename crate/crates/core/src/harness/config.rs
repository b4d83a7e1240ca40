//! Experiment configuration (TOML). Unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! source = "synthetic"        # or "cifar10" with `path`
//! classes = 4
//! dim = 16
//! samples_per_class = 500
//! class_separation = 5.0
//! alpha = 0.1                 # Dirichlet label skew; omit for IID
//! # quantity_proportions = [0.4, 0.3, 0.2, 0.1]
//! test_fraction = 0.2
//!
//! [data.ood]
//! mode = "mean_shift"         # or "fresh_classes"
//! magnitude = 10.0
//!
//! [model]
//! extractor_layers = [32, 32]
//! head_hidden = [16]          # the class-count layer is appended
//!
//! [fed]
//! clients = 8
//! rounds = 30
//! local_epochs = 10
//! participation = 1.0
//! lr = 0.05
//! batch_size = 32
//! method = "fedavg"           # or "fedprox" (mu_prox, default 0.01)
//!
//! [aph]                       # optional
//! heads = 10
//! lambda_offset = 0.0         # lambda = mu + offset unless `lambda` is set
//! beta_low = 0.001
//! beta_high = 0.1
//! epochs = 5
//! averaging = "probabilities"
//! prior = "global"            # or "local"
//!
//! [finetune]
//! rounds = 5
//! epochs_per_round = 1
//! scope = "head_only"         # or "last_layer_only"
//!
//! [metrics]
//! bins = 15
//! entropy_bins = 30
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aph::{Averaging, DEFAULT_BETA_LOW};
use crate::data::OodMode;
use crate::error::{Error, Result};
use crate::fed::{FedConfig, Method, DEFAULT_MU_PROX};
use crate::metrics::{DEFAULT_BINS, ENTROPY_BINS};
use crate::nn::{ModelSpec, Scope};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub fed: FedSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aph: Option<AphSection>,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "defaults::source")]
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default = "defaults::classes")]
    pub classes: usize,
    #[serde(default = "defaults::dim")]
    pub dim: usize,
    #[serde(default = "defaults::samples_per_class")]
    pub samples_per_class: usize,
    #[serde(default = "defaults::class_separation")]
    pub class_separation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantity_proportions: Option<Vec<f64>>,
    #[serde(default = "defaults::test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "defaults::ood", skip_serializing_if = "Option::is_none")]
    pub ood: Option<OodSection>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: defaults::source(),
            path: None,
            classes: defaults::classes(),
            dim: defaults::dim(),
            samples_per_class: defaults::samples_per_class(),
            class_separation: defaults::class_separation(),
            alpha: None,
            quantity_proportions: None,
            test_fraction: defaults::test_fraction(),
            ood: defaults::ood(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodSection {
    pub mode: OodMode,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "defaults::extractor_layers")]
    pub extractor_layers: Vec<usize>,
    #[serde(default = "defaults::head_hidden")]
    pub head_hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            extractor_layers: defaults::extractor_layers(),
            head_hidden: defaults::head_hidden(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Fedavg,
    Fedprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedSection {
    #[serde(default = "defaults::clients")]
    pub clients: usize,
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    #[serde(default = "defaults::local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "defaults::participation")]
    pub participation: f64,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::method")]
    pub method: MethodName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_prox: Option<f64>,
}

impl Default for FedSection {
    fn default() -> Self {
        FedSection {
            clients: defaults::clients(),
            rounds: defaults::rounds(),
            local_epochs: defaults::local_epochs(),
            participation: defaults::participation(),
            lr: defaults::lr(),
            batch_size: defaults::batch_size(),
            method: defaults::method(),
            mu_prox: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    /// The aggregated global head.
    Global,
    /// Each client's last local model.
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AphSection {
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub lambda_offset: f64,
    #[serde(default = "defaults::beta_low")]
    pub beta_low: f64,
    #[serde(default = "defaults::beta_high")]
    pub beta_high: f64,
    #[serde(default = "defaults::aph_epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::averaging")]
    pub averaging: Averaging,
    #[serde(default = "defaults::prior")]
    pub prior: PriorSource,
}

impl Default for AphSection {
    fn default() -> Self {
        AphSection {
            heads: defaults::heads(),
            lambda: None,
            lambda_offset: 0.0,
            beta_low: defaults::beta_low(),
            beta_high: defaults::beta_high(),
            epochs: defaults::aph_epochs(),
            averaging: defaults::averaging(),
            prior: defaults::prior(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneScope {
    HeadOnly,
    LastLayerOnly,
}

impl From<FinetuneScope> for Scope {
    fn from(s: FinetuneScope) -> Scope {
        match s {
            FinetuneScope::HeadOnly => Scope::HeadOnly,
            FinetuneScope::LastLayerOnly => Scope::LastLayerOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    #[serde(default = "defaults::ft_rounds")]
    pub rounds: usize,
    #[serde(default = "defaults::ft_epochs_per_round")]
    pub epochs_per_round: usize,
    #[serde(default = "defaults::ft_scope")]
    pub scope: FinetuneScope,
    /// Defaults to the federated learning rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            rounds: defaults::ft_rounds(),
            epochs_per_round: defaults::ft_epochs_per_round(),
            scope: defaults::ft_scope(),
            lr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    #[serde(default = "defaults::bins")]
    pub bins: usize,
    #[serde(default = "defaults::entropy_bins")]
    pub entropy_bins: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            bins: defaults::bins(),
            entropy_bins: defaults::entropy_bins(),
        }
    }
}

mod defaults {
    use super::*;

    pub fn source() -> DataSource {
        DataSource::Synthetic
    }
    pub fn classes() -> usize {
        4
    }
    pub fn dim() -> usize {
        16
    }
    pub fn samples_per_class() -> usize {
        500
    }
    pub fn class_separation() -> f64 {
        5.0
    }
    pub fn test_fraction() -> f64 {
        0.2
    }
    pub fn ood() -> Option<OodSection> {
        Some(OodSection {
            mode: OodMode::MeanShift,
            magnitude: 10.0,
        })
    }
    pub fn extractor_layers() -> Vec<usize> {
        vec![32, 32]
    }
    pub fn head_hidden() -> Vec<usize> {
        vec![16]
    }
    pub fn clients() -> usize {
        8
    }
    pub fn rounds() -> usize {
        30
    }
    pub fn local_epochs() -> usize {
        10
    }
    pub fn participation() -> f64 {
        1.0
    }
    pub fn lr() -> f64 {
        0.05
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn method() -> MethodName {
        MethodName::Fedavg
    }
    pub fn heads() -> usize {
        10
    }
    pub fn beta_low() -> f64 {
        DEFAULT_BETA_LOW
    }
    pub fn beta_high() -> f64 {
        0.1
    }
    pub fn aph_epochs() -> usize {
        5
    }
    pub fn averaging() -> Averaging {
        Averaging::Probabilities
    }
    pub fn prior() -> PriorSource {
        PriorSource::Global
    }
    pub fn ft_rounds() -> usize {
        5
    }
    pub fn ft_epochs_per_round() -> usize {
        1
    }
    pub fn ft_scope() -> FinetuneScope {
        FinetuneScope::HeadOnly
    }
    pub fn bins() -> usize {
        DEFAULT_BINS
    }
    pub fn entropy_bins() -> usize {
        ENTROPY_BINS
    }
}

impl ExperimentConfig {
    /// Default synthetic experiment with the given root seed.
    pub fn synthetic(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            output_dir: None,
            data: DataSection::default(),
            model: ModelSection::default(),
            fed: FedSection::default(),
            aph: Some(AphSection::default()),
            finetune: FinetuneSection::default(),
            metrics: MetricsSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let path = e
                .span()
                .map(|s| format!("byte {}..{}", s.start, s.end))
                .unwrap_or_else(|| "<config>".into());
            Error::config(path, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                if d.classes < 2 {
                    return Err(Error::config("data.classes", "must be >= 2"));
                }
                if d.dim < 2 {
                    return Err(Error::config("data.dim", "must be >= 2"));
                }
                if d.samples_per_class == 0 {
                    return Err(Error::config("data.samples_per_class", "must be >= 1"));
                }
                if !(d.class_separation >= 0.0 && d.class_separation.is_finite()) {
                    return Err(Error::config("data.class_separation", "must be finite and >= 0"));
                }
            }
            DataSource::Cifar10 => {
                if d.path.is_none() {
                    return Err(Error::config("data.path", "required when data.source = \"cifar10\""));
                }
                if d.classes != 10 || d.dim != 3072 {
                    return Err(Error::config(
                        "data.classes",
                        "cifar10 data requires classes = 10 and dim = 3072",
                    ));
                }
            }
        }
        if let Some(a) = d.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::config("data.alpha", "must be > 0"));
            }
            if d.quantity_proportions.is_some() {
                return Err(Error::config(
                    "data.quantity_proportions",
                    "cannot be combined with data.alpha",
                ));
            }
        }
        if let Some(p) = &d.quantity_proportions {
            if p.len() != self.fed.clients {
                return Err(Error::config(
                    "data.quantity_proportions",
                    format!("has {} entries for {} clients", p.len(), self.fed.clients),
                ));
            }
            if p.iter().any(|&v| v.is_nan() || v <= 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::config(
                    "data.quantity_proportions",
                    "must be positive and sum to 1",
                ));
            }
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(Error::config("data.test_fraction", "must be in (0, 1)"));
        }
        if let Some(o) = &d.ood {
            if !(o.magnitude >= 0.0 && o.magnitude.is_finite()) {
                return Err(Error::config("data.ood.magnitude", "must be finite and >= 0"));
            }
        }
        if self
            .model
            .extractor_layers
            .iter()
            .chain(&self.model.head_hidden)
            .any(|&w| w == 0)
        {
            return Err(Error::config("model", "layer widths must be >= 1"));
        }
        self.fed_config()
            .validate()
            .map_err(|e| Error::config("fed", e.to_string()))?;
        if self.fed.mu_prox.is_some() && self.fed.method != MethodName::Fedprox {
            return Err(Error::config("fed.mu_prox", "only valid with method = \"fedprox\""));
        }
        if let Some(a) = &self.aph {
            if a.heads == 0 {
                return Err(Error::config("aph.heads", "must be >= 1"));
            }
            if !(a.beta_low > 0.0 && a.beta_low <= a.beta_high && a.beta_high.is_finite()) {
                return Err(Error::config("aph.beta_low", "need 0 < beta_low <= beta_high"));
            }
            if a.lambda.is_some_and(|l| !l.is_finite()) || !a.lambda_offset.is_finite() {
                return Err(Error::config("aph.lambda", "must be finite"));
            }
        }
        if self.finetune.lr.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::config("finetune.lr", "must be > 0"));
        }
        if self.metrics.bins == 0 {
            return Err(Error::config("metrics.bins", "must be >= 1"));
        }
        if self.metrics.entropy_bins == 0 {
            return Err(Error::config("metrics.entropy_bins", "must be >= 1"));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut head = self.model.head_hidden.clone();
        head.push(self.data.classes);
        ModelSpec::new(self.data.dim, self.model.extractor_layers.clone(), head)
    }

    pub fn fed_config(&self) -> FedConfig {
        let f = &self.fed;
        FedConfig {
            clients: f.clients,
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            participation: f.participation,
            lr: f.lr,
            batch_size: f.batch_size,
            method: match f.method {
                MethodName::Fedavg => Method::FedAvg,
                MethodName::Fedprox => Method::FedProx {
                    mu: f.mu_prox.unwrap_or(DEFAULT_MU_PROX),
                },
            },
            seed: self.stream_seed("fed"),
        }
    }

    /// Seed of a named stream under the root seed.
    pub fn stream_seed(&self, label: &str) -> u64 {
        seed::derive(self.seed, label, &[])
    }
}
