//! Federated training engine: participant selection, local updates,
//! size-weighted aggregation and the frozen-extractor head fine-tuning diagnostic.
//!
//! Clients are stateless between rounds. All randomness comes from named
//! streams of `FedConfig::seed`:
//!
//! - `init`: initial global parameters
//! - `participation` / `[round]`: the round's client subset
//! - `shuffle` / `[client]`: per-epoch mini-batch order, indexed by the
//!   number of epochs that client has trained so far

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientData, Dataset};
use crate::error::{Error, Result};
use crate::eval::{self, Predictor, Single};
use crate::metrics::{self, CalibrationReport, OodReport};
use crate::nn::{self, Anchor, ModelParams, ModelSpec, Scope, TrainConfig, Trained};
use crate::seed::{self, ShuffleStream};

pub const DEFAULT_MU_PROX: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Method {
    FedAvg,
    FedProx { mu: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    /// Participation ratio gamma in (0, 1].
    pub participation: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub method: Method,
    pub seed: u64,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::InvalidArgument("client count must be >= 1".into()));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidArgument("rounds must be >= 1".into()));
        }
        if self.local_epochs == 0 {
            return Err(Error::InvalidArgument("local epochs must be >= 1".into()));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "participation ratio must be in (0, 1], got {}",
                self.participation
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if let Method::FedProx { mu } = self.method {
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(Error::InvalidArgument(format!("mu_prox must be >= 0, got {mu}")));
            }
        }
        Ok(())
    }
}

/// `ceil(gamma * n)`, clamped to `[1, n]`.
///
/// A small slack absorbs products such as `0.1 * 30 = 3.0000000000000004`.
pub fn participants_per_round(clients: usize, gamma: f64) -> usize {
    let raw = (gamma * clients as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(clients)
}

/// Uniform sample of `ceil(gamma * n)` distinct client ids, returned ascending.
pub fn select_participants<R: rand::Rng + ?Sized>(clients: usize, gamma: f64, rng: &mut R) -> Vec<usize> {
    let k = participants_per_round(clients, gamma);
    let mut ids = rand::seq::index::sample(rng, clients, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Train a copy of `global` on one client's data for `epochs` epochs.
///
/// `epochs_done` is how many epochs this client has already trained in earlier
/// rounds; it positions the client's shuffle stream.
pub fn local_update(
    spec: &ModelSpec,
    global: &ModelParams,
    client_id: usize,
    train: &Dataset,
    cfg: &FedConfig,
    epochs: usize,
    epochs_done: u64,
) -> Result<Trained> {
    let tc = TrainConfig {
        epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        scope: Scope::All,
    };
    let anchor = match cfg.method {
        Method::FedAvg => None,
        Method::FedProx { mu } => Some(Anchor { reference: global, mu }),
    };
    let stream = ShuffleStream::starting_at(seed::derive(cfg.seed, "shuffle", &[client_id as u64]), epochs_done);
    nn::sgd_epochs(spec, global, &train.batch()?, &tc, anchor, stream)
}

/// Coordinate-wise weighted mean `sum_i (w_i / W) theta_i`.
///
/// Each coordinate is computed as `min + sum (w_i / W)(theta_i - min)` with the
/// terms summed in sorted order, which makes the result independent of input
/// order and exactly equal to the input when all inputs agree.
pub fn aggregate(updates: &[(&ModelParams, f64)]) -> Result<ModelParams> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| Error::InvalidArgument("aggregation needs at least one update".into()))?;
    for (p, w) in updates {
        if p.base.len() != first.base.len() || p.head.len() != first.head.len() {
            return Err(Error::shape(
                "aggregate",
                format!("{}+{} params", first.base.len(), first.head.len()),
                format!("{}+{} params", p.base.len(), p.head.len()),
            ));
        }
        if !(*w >= 0.0 && w.is_finite()) {
            return Err(Error::InvalidArgument(format!("aggregation weight {w} is invalid")));
        }
    }
    let mut weights: Vec<f64> = updates.iter().map(|(_, w)| *w).collect();
    weights.sort_by(f64::total_cmp);
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("aggregation weights sum to zero".into()));
    }
    if updates.len() == 1 {
        return Ok((*first).clone());
    }
    let fractions: Vec<f64> = updates.iter().map(|(_, w)| w / total).collect();
    let mut terms = vec![0.0; updates.len()];
    let mut combine = |pick: &dyn Fn(&ModelParams) -> &[f64], len: usize| -> Vec<f64> {
        (0..len)
            .map(|j| {
                let lo = updates.iter().map(|(p, _)| pick(p)[j]).fold(f64::INFINITY, f64::min);
                for (t, ((p, _), f)) in terms.iter_mut().zip(updates.iter().zip(&fractions)) {
                    *t = f * (pick(p)[j] - lo);
                }
                terms.sort_by(f64::total_cmp);
                lo + terms.iter().sum::<f64>()
            })
            .collect()
    };
    let base = combine(&|p| &p.base, first.base.len());
    let head = combine(&|p| &p.head, first.head.len());
    Ok(ModelParams { base, head })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientLoss {
    pub client: usize,
    pub losses: Vec<f64>,
}

/// One line of the round log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    /// 1-based round index.
    pub round: usize,
    pub participants: Vec<usize>,
    pub accuracy: f64,
    pub f_ece: f64,
    pub nll: f64,
    pub local_losses: Vec<ClientLoss>,
}

/// Global model, each client's most recent local model, and the full log.
///
/// Also serves as the resumable training state after any completed round.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationResult {
    pub global: ModelParams,
    pub locals: Vec<Option<ModelParams>>,
    pub logs: Vec<RoundLog>,
}

/// Round-by-round driver. [`run_federation`] is the one-shot wrapper.
pub struct Federation<'a> {
    spec: &'a ModelSpec,
    clients: &'a [ClientData],
    cfg: FedConfig,
    epochs: usize,
    bins: usize,
    state: FederationResult,
    epochs_done: Vec<u64>,
}

impl<'a> Federation<'a> {
    pub fn new(spec: &'a ModelSpec, clients: &'a [ClientData], cfg: &FedConfig) -> Result<Self> {
        let init = ModelParams::init(spec, &mut seed::stream(cfg.seed, "init", &[]));
        Self::from_state(
            spec,
            clients,
            cfg,
            FederationResult {
                global: init,
                locals: vec![None; clients.len()],
                logs: Vec::new(),
            },
        )
    }

    /// Continue from a state saved after some completed round.
    pub fn from_state(
        spec: &'a ModelSpec,
        clients: &'a [ClientData],
        cfg: &FedConfig,
        state: FederationResult,
    ) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        if clients.len() != cfg.clients {
            return Err(Error::InvalidArgument(format!(
                "{} client partitions for a {}-client federation",
                clients.len(),
                cfg.clients
            )));
        }
        if state.locals.len() != clients.len() || state.logs.len() > cfg.rounds {
            return Err(Error::InvalidArgument(
                "saved federation state does not match config".into(),
            ));
        }
        state.global.check(spec)?;
        let mut epochs_done = vec![0u64; clients.len()];
        for log in &state.logs {
            for &c in &log.participants {
                epochs_done[c] += cfg.local_epochs as u64;
            }
        }
        Ok(Federation {
            spec,
            clients,
            cfg: cfg.clone(),
            epochs: cfg.local_epochs,
            bins: metrics::DEFAULT_BINS,
            state,
            epochs_done,
        })
    }

    /// Diagnostic override of the local epoch count (may be 0).
    pub fn override_local_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn with_bins(mut self, bins: usize) -> Self {
        self.bins = bins;
        self
    }

    pub fn completed_rounds(&self) -> usize {
        self.state.logs.len()
    }

    pub fn is_done(&self) -> bool {
        self.completed_rounds() >= self.cfg.rounds
    }

    pub fn state(&self) -> &FederationResult {
        &self.state
    }

    pub fn into_result(self) -> FederationResult {
        self.state
    }

    /// Run one round: select, distribute, train locally, aggregate, evaluate.
    pub fn step(&mut self) -> Result<&RoundLog> {
        let round = self.completed_rounds() + 1;
        let mut rng = seed::stream(self.cfg.seed, "participation", &[round as u64]);
        let participants = select_participants(self.cfg.clients, self.cfg.participation, &mut rng);

        let global = &self.state.global;
        let trained: Vec<Result<Trained>> = participants
            .par_iter()
            .map(|&c| {
                let data = &self.clients[c];
                local_update(
                    self.spec,
                    global,
                    c,
                    &data.train,
                    &self.cfg,
                    self.epochs,
                    self.epochs_done[c],
                )
                .map_err(|e| Error::ClientFailure {
                    round,
                    client: c,
                    source: Box::new(e),
                })
            })
            .collect();
        let trained: Vec<Trained> = trained.into_iter().collect::<Result<_>>()?;

        let updates: Vec<(&ModelParams, f64)> = trained
            .iter()
            .zip(&participants)
            .map(|(t, &c)| (&t.params, self.clients[c].train.len() as f64))
            .collect();
        let new_global = aggregate(&updates)?;

        let local_losses = participants
            .iter()
            .zip(&trained)
            .map(|(&c, t)| ClientLoss {
                client: c,
                losses: t.epoch_losses.clone(),
            })
            .collect();
        for (&c, t) in participants.iter().zip(trained) {
            self.epochs_done[c] += self.epochs as u64;
            self.state.locals[c] = Some(t.params);
        }
        self.state.global = new_global;

        let (accuracy, f_ece, nll) = self.evaluate_global()?;
        self.state.logs.push(RoundLog {
            round,
            participants,
            accuracy,
            f_ece,
            nll,
            local_losses,
        });
        Ok(self.state.logs.last().unwrap())
    }

    fn evaluate_global(&self) -> Result<(f64, f64, f64)> {
        let single = Single {
            spec: self.spec,
            params: &self.state.global,
        };
        let models: Vec<&dyn Predictor> = vec![&single; self.clients.len()];
        let sets = eval::test_sets(&models, self.clients, "global")?;
        if sets.is_empty() {
            return Ok((f64::NAN, f64::NAN, f64::NAN));
        }
        let (f, _) = metrics::f_ece(&sets, self.bins)?;
        Ok((metrics::accuracy(&sets)?, f, metrics::nll(&sets)?))
    }

    pub fn run(mut self) -> Result<FederationResult> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(self.state)
    }
}

/// Full protocol: `R` rounds from parameters initialized by the config seed.
pub fn run_federation(spec: &ModelSpec, clients: &[ClientData], cfg: &FedConfig) -> Result<FederationResult> {
    Federation::new(spec, clients, cfg)?.run()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneOptions {
    /// Number of fine-tuning rounds; each round is `epochs_per_round` local epochs.
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub scope: Scope,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub bins: usize,
}

/// Before/after comparison of per-client head fine-tuning from the global model.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneDiagnostic {
    pub params: Vec<ModelParams>,
    pub before: CalibrationReport,
    pub after: CalibrationReport,
    pub ood_before: Option<OodReport>,
    pub ood_after: Option<OodReport>,
}

/// Fine-tune each client's copy of the global head on its local training data
/// with the extractor frozen.
pub fn finetune_heads(
    spec: &ModelSpec,
    global: &ModelParams,
    clients: &[ClientData],
    opts: &FinetuneOptions,
) -> Result<Vec<ModelParams>> {
    if opts.scope == Scope::All {
        return Err(Error::InvalidArgument(
            "head fine-tuning scope must be head_only or last_layer_only".into(),
        ));
    }
    let tc = TrainConfig {
        epochs: opts.rounds * opts.epochs_per_round,
        lr: opts.lr,
        batch_size: opts.batch_size,
        scope: opts.scope,
    };
    clients
        .par_iter()
        .map(|c| {
            let stream = ShuffleStream::new(seed::derive(opts.seed, "finetune", &[c.client_id as u64]));
            nn::sgd_epochs(spec, global, &c.train.batch()?, &tc, None, stream).map(|t| t.params)
        })
        .collect()
}

pub fn head_finetune_diagnostic(
    spec: &ModelSpec,
    result: &FederationResult,
    clients: &[ClientData],
    ood: Option<&Dataset>,
    opts: &FinetuneOptions,
) -> Result<FinetuneDiagnostic> {
    let tuned = finetune_heads(spec, &result.global, clients, opts)?;
    let global = Single {
        spec,
        params: &result.global,
    };
    let before_models: Vec<&dyn Predictor> = vec![&global; clients.len()];
    let tuned_single: Vec<Single<'_>> = tuned.iter().map(|p| Single { spec, params: p }).collect();
    let after_models: Vec<&dyn Predictor> = tuned_single.iter().map(|s| s as &dyn Predictor).collect();

    let before = CalibrationReport::compute(
        "global",
        &eval::test_sets(&before_models, clients, "global")?,
        opts.bins,
    )?;
    let after = CalibrationReport::compute(
        "finetune",
        &eval::test_sets(&after_models, clients, "finetune")?,
        opts.bins,
    )?;
    let ids: Vec<usize> = clients.iter().map(|c| c.client_id).collect();
    let (ood_before, ood_after) = match ood {
        Some(o) => (
            Some(OodReport::compute(
                "global",
                &eval::ood_sets(&before_models, &ids, o, "global")?,
            )),
            Some(OodReport::compute(
                "finetune",
                &eval::ood_sets(&after_models, &ids, o, "finetune")?,
            )),
        ),
        None => (None, None),
    };
    Ok(FinetuneDiagnostic {
        params: tuned,
        before,
        after,
        ood_before,
        ood_after,
    })
}
