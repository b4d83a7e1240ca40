//! Glue between models and the metrics module: turn per-client models into prediction sets.

use crate::data::{ClientData, Dataset};
use crate::error::Result;
use crate::metrics::PredictionSet;
use crate::nn::{self, Matrix, ModelParams, ModelSpec};

/// Anything that maps inputs to class probabilities.
pub trait Predictor: Sync {
    fn predict_proba(&self, inputs: &Matrix) -> Result<Matrix>;
}

/// A single `(spec, params)` model.
#[derive(Debug, Clone, Copy)]
pub struct Single<'a> {
    pub spec: &'a ModelSpec,
    pub params: &'a ModelParams,
}

impl Predictor for Single<'_> {
    fn predict_proba(&self, inputs: &Matrix) -> Result<Matrix> {
        nn::predict_proba(self.spec, self.params, inputs)
    }
}

/// Predictions of `models[i]` on `clients[i].test`; clients with an empty test set are skipped.
pub fn test_sets(models: &[&dyn Predictor], clients: &[ClientData], model_id: &str) -> Result<Vec<PredictionSet>> {
    let mut out = Vec::with_capacity(clients.len());
    for (m, c) in models.iter().zip(clients) {
        if c.test.is_empty() {
            continue;
        }
        let probs = m.predict_proba(&c.test.inputs)?;
        out.push(PredictionSet::new(c.client_id, probs, c.test.labels.clone(), model_id)?);
    }
    Ok(out)
}

/// Predictions of every client model on the shared OOD set.
pub fn ood_sets(
    models: &[&dyn Predictor],
    client_ids: &[usize],
    ood: &Dataset,
    model_id: &str,
) -> Result<Vec<PredictionSet>> {
    models
        .iter()
        .zip(client_ids)
        .map(|(m, &id)| {
            let probs = m.predict_proba(&ood.inputs)?;
            PredictionSet::new(id, probs, ood.labels.clone(), model_id)
        })
        .collect()
}
