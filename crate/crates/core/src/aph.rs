//! Assembled projection heads.
//!
//! The trained head is treated as a prior. Each of `M` heads starts from
//! `prior + 10^lambda * sigma` with `sigma ~ N(0, I)`, is fine-tuned on the
//! client's local data with the extractor frozen at a learning rate drawn
//! from `U[beta_l, beta_u]`, and predictions are averaged over heads.
//!
//! Head inits and learning rates come from one stream, drawn in the order
//! `init_1, beta_1, init_2, beta_2, ...` (retries continue the same stream).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::Predictor;
use crate::nn::{self, Matrix, ModelParams, ModelSpec, Scope, TrainConfig};
use crate::seed::{self, ShuffleStream};

/// Extra attempts for a head whose fine-tune diverges.
pub const HEAD_RETRIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Softmax each head, then average the probability vectors.
    Probabilities,
    /// Average logits, then softmax once.
    Logits,
}

impl Averaging {
    fn as_str(self) -> &'static str {
        match self {
            Averaging::Probabilities => "probabilities",
            Averaging::Logits => "logits",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AphConfig {
    pub heads: usize,
    pub lambda: f64,
    pub beta_low: f64,
    pub beta_high: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub averaging: Averaging,
    pub seed: u64,
}

impl AphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::InvalidArgument("APH needs at least one head".into()));
        }
        if !(self.beta_low > 0.0 && self.beta_low <= self.beta_high && self.beta_high.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "APH learning-rate bounds must satisfy 0 < beta_l <= beta_u, got [{}, {}]",
                self.beta_low, self.beta_high
            )));
        }
        if !self.lambda.is_finite() {
            return Err(Error::InvalidArgument("lambda must be finite".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// `prior + 10^lambda * sigma`, one standard normal draw per coordinate.
pub fn sample_head_init<R: Rng + ?Sized>(prior: &[f64], lambda: f64, rng: &mut R) -> Vec<f64> {
    let scale = 10f64.powf(lambda);
    prior
        .iter()
        .map(|&p| {
            let z: f64 = rng.sample(StandardNormal);
            p + scale * z
        })
        .collect()
}

/// Order of magnitude of the mean absolute head parameter: `floor(log10(mean |theta|))`.
pub fn default_lambda(prior: &[f64]) -> Result<f64> {
    if prior.is_empty() {
        return Err(Error::InvalidArgument("empty head prior".into()));
    }
    let mean = prior.iter().map(|v| v.abs()).sum::<f64>() / prior.len() as f64;
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(Error::InvalidArgument(
            "head prior has zero (or non-finite) mean magnitude; lambda undefined".into(),
        ));
    }
    Ok(mean.log10().floor())
}

/// The five-point sweep `{mu - 0.5, mu - 0.2, mu, mu + 0.2, mu + 0.5}`.
pub fn lambda_grid(mu: f64) -> [f64; 5] {
    [mu - 0.5, mu - 0.2, mu, mu + 0.2, mu + 0.5]
}

/// Upper learning-rate bounds swept by the comparison suite.
pub const BETA_HIGH_GRID: [f64; 3] = [10.0, 1.0, 0.1];
pub const DEFAULT_BETA_LOW: f64 = 0.001;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadEnsemble {
    pub spec: ModelSpec,
    pub base: Vec<f64>,
    pub heads: Vec<Vec<f64>>,
    /// Learning rate each surviving head was trained with.
    pub betas: Vec<f64>,
    pub config: AphConfig,
    pub source: String,
}

/// Build `cfg.heads` fine-tuned heads around `model.head`.
///
/// A head whose fine-tune diverges is redrawn (fresh init and learning rate)
/// up to [`HEAD_RETRIES`] times before the whole build fails.
pub fn build_ensemble(
    spec: &ModelSpec,
    model: &ModelParams,
    local: &Dataset,
    cfg: &AphConfig,
    source: &str,
) -> Result<HeadEnsemble> {
    cfg.validate()?;
    model.check(spec)?;
    let batch = local.batch()?;
    // extractor output is fixed for the whole build
    let feats = nn::features(spec, &model.base, &local.inputs)?;
    let feat_spec = ModelSpec::new(spec.feature_dim(), Vec::new(), spec.head_layers.clone())?;
    let feat_batch = nn::Batch::new(&feats, batch.labels)?;

    let mut rng = seed::stream(cfg.seed, "aph", &[]);
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut betas = Vec::with_capacity(cfg.heads);
    for m in 0..cfg.heads {
        let mut done = None;
        for attempt in 0..=HEAD_RETRIES {
            let init = sample_head_init(&model.head, cfg.lambda, &mut rng);
            let u: f64 = rng.random();
            let beta = cfg.beta_low + (cfg.beta_high - cfg.beta_low) * u;
            let tc = TrainConfig {
                epochs: cfg.epochs,
                lr: beta,
                batch_size: cfg.batch_size,
                scope: Scope::HeadOnly,
            };
            let stream = ShuffleStream::new(seed::derive(cfg.seed, "aph-shuffle", &[m as u64, attempt as u64]));
            let start = ModelParams {
                base: Vec::new(),
                head: init,
            };
            match nn::sgd_epochs(&feat_spec, &start, &feat_batch, &tc, None, stream) {
                Ok(t) => {
                    done = Some((t.params.head, beta));
                    break;
                }
                Err(Error::Divergence { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        let (head, beta) = done.ok_or(Error::HeadDiverged {
            head: m,
            attempts: HEAD_RETRIES + 1,
        })?;
        heads.push(head);
        betas.push(beta);
    }
    Ok(HeadEnsemble {
        spec: spec.clone(),
        base: model.base.clone(),
        heads,
        betas,
        config: cfg.clone(),
        source: source.to_string(),
    })
}

impl HeadEnsemble {
    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Softmax output of every head, sharing one extractor pass.
    pub fn per_head_probs(&self, inputs: &Matrix) -> Result<Vec<Matrix>> {
        let feats = nn::features(&self.spec, &self.base, inputs)?;
        self.heads
            .iter()
            .map(|h| Ok(nn::softmax(&nn::head_logits(&self.spec, h, &feats)?)))
            .collect()
    }

    /// Averaged ensemble prediction.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        let feats = nn::features(&self.spec, &self.base, inputs)?;
        let m = self.heads.len() as f64;
        let mut acc = Matrix::zeros(inputs.rows(), self.spec.classes());
        for h in &self.heads {
            let logits = nn::head_logits(&self.spec, h, &feats)?;
            let part = match self.config.averaging {
                Averaging::Probabilities => nn::softmax(&logits),
                Averaging::Logits => logits,
            };
            for i in 0..acc.rows() {
                for (a, v) in acc.row_mut(i).iter_mut().zip(part.row(i)) {
                    *a += v;
                }
            }
        }
        for i in 0..acc.rows() {
            for a in acc.row_mut(i) {
                *a /= m;
            }
        }
        Ok(match self.config.averaging {
            Averaging::Probabilities => acc,
            Averaging::Logits => nn::softmax(&acc),
        })
    }

    pub fn to_container(&self) -> Container {
        let c = &self.config;
        let mut out = Container::new("head_ensemble");
        out.set("spec", self.spec.encode())
            .set("source", &self.source)
            .set("heads", self.heads.len())
            .set("lambda", c.lambda)
            .set("beta_low", c.beta_low)
            .set("beta_high", c.beta_high)
            .set("epochs", c.epochs)
            .set("batch_size", c.batch_size)
            .set("averaging", c.averaging.as_str())
            .set("seed", c.seed)
            .set(
                "betas",
                self.betas.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            );
        out.push_array("base", self.base.clone());
        for (m, h) in self.heads.iter().enumerate() {
            out.push_array(&format!("head.{m}"), h.clone());
        }
        out
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("head_ensemble")?;
        let spec = ModelSpec::decode(c.require("spec")?)?;
        let heads: usize = c.parse_field("heads")?;
        let averaging = match c.require("averaging")? {
            "probabilities" => Averaging::Probabilities,
            "logits" => Averaging::Logits,
            other => return Err(Error::Format(format!("unknown averaging '{other}'"))),
        };
        let config = AphConfig {
            heads,
            lambda: c.parse_field("lambda")?,
            beta_low: c.parse_field("beta_low")?,
            beta_high: c.parse_field("beta_high")?,
            epochs: c.parse_field("epochs")?,
            batch_size: c.parse_field("batch_size")?,
            averaging,
            seed: c.parse_field("seed")?,
        };
        let betas = c
            .require("betas")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| Error::Format(format!("bad beta '{s}'"))))
            .collect::<Result<Vec<_>>>()?;
        let base = c.array("base")?.to_vec();
        let heads_v = (0..heads)
            .map(|m| c.array(&format!("head.{m}")).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        if base.len() != spec.base_len() || heads_v.iter().any(|h| h.len() != spec.head_len()) || betas.len() != heads {
            return Err(Error::Format("head ensemble arrays do not match header".into()));
        }
        Ok(HeadEnsemble {
            spec,
            base,
            heads: heads_v,
            betas,
            config,
            source: c.require("source")?.to_string(),
        })
    }
}

impl Predictor for HeadEnsemble {
    fn predict_proba(&self, inputs: &Matrix) -> Result<Matrix> {
        self.predict(inputs)
    }
}

/// Per-sample forward operation counts of the two model parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub extractor_flops: f64,
    pub head_flops: f64,
}

/// Whether the single baseline head counts toward the APH overhead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overhead {
    /// `(M - 1) * head / (extractor + head)`: only heads beyond the original one.
    ExtraHeads,
    /// `M * head / (extractor + head)`.
    AllHeads,
}

impl CostModel {
    /// Dense layer forward cost `2 * in * out + out`, summed per part.
    pub fn from_spec(spec: &ModelSpec) -> Self {
        let sum = |shapes: Vec<nn::LayerShape>| shapes.iter().map(|s| s.flops() as f64).sum();
        CostModel {
            extractor_flops: sum(spec.extractor_shapes()),
            head_flops: sum(spec.head_shapes()),
        }
    }

    /// A model whose head is fraction `c` of the whole forward pass.
    pub fn from_head_fraction(c: f64) -> Self {
        CostModel {
            extractor_flops: 1.0 - c,
            head_flops: c,
        }
    }

    pub fn head_fraction(&self) -> f64 {
        self.head_flops / (self.extractor_flops + self.head_flops)
    }
}

/// Extra inference cost of an `heads`-head ensemble relative to the single model.
pub fn cost_fraction(cost: &CostModel, heads: usize, convention: Overhead) -> f64 {
    let c = cost.head_fraction();
    match convention {
        Overhead::ExtraHeads => heads.saturating_sub(1) as f64 * c,
        Overhead::AllHeads => heads as f64 * c,
    }
}
