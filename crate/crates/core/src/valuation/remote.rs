//! Client for the value-scoring sidecar.
//!
//! `POST /score` takes `{propositions, descriptors}` and answers
//! `{scores, model_id}` with one raw score row per proposition, columns in
//! descriptor order. `GET /health` answers 200 when the model is loaded.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{classified, ClassifiedProposition, Classifier, ValuationError};
use crate::corpus::ValueScheme;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub propositions: Vec<String>,
    pub descriptors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub scores: Vec<Vec<f64>>,
    pub model_id: String,
}

pub struct RemoteScorer {
    base_url: String,
    client: reqwest::blocking::Client,
}

fn unavailable(e: reqwest::Error) -> ValuationError {
    ValuationError::BackendUnavailable(e.to_string())
}

/// Numerically stable softmax.
pub fn softmax(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl RemoteScorer {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Result<Self, ValuationError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(unavailable)?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client,
        })
    }

    pub fn health(&self) -> Result<(), ValuationError> {
        let resp = self
            .client
            .get(format!("{}/health", self.base_url))
            .send()
            .map_err(unavailable)?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(ValuationError::BackendUnavailable(format!(
                "health check returned {}",
                resp.status()
            )))
        }
    }

    /// Raw scores for `propositions`, checked for shape and finiteness.
    pub fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, ValuationError> {
        let resp = self
            .client
            .post(format!("{}/score", self.base_url))
            .json(request)
            .send()
            .map_err(unavailable)?;
        let status = resp.status();
        let body = resp.text().map_err(unavailable)?;
        if status.is_server_error() {
            return Err(ValuationError::BackendUnavailable(format!(
                "{status}: {body}"
            )));
        }
        if !status.is_success() {
            return Err(ValuationError::MalformedResponse(format!(
                "{status}: {body}"
            )));
        }
        let parsed: ScoreResponse = serde_json::from_str(&body)
            .map_err(|e| ValuationError::MalformedResponse(e.to_string()))?;
        if parsed.scores.len() != request.propositions.len() {
            return Err(ValuationError::MalformedResponse(format!(
                "{} score rows for {} propositions",
                parsed.scores.len(),
                request.propositions.len()
            )));
        }
        for (index, row) in parsed.scores.iter().enumerate() {
            if row.len() != request.descriptors.len() {
                return Err(ValuationError::Scorer {
                    index,
                    reason: format!(
                        "{} scores for {} descriptors",
                        row.len(),
                        request.descriptors.len()
                    ),
                });
            }
            if row.iter().any(|s| !s.is_finite()) {
                return Err(ValuationError::Scorer {
                    index,
                    reason: "non-finite score".into(),
                });
            }
        }
        Ok(parsed)
    }
}

impl Classifier for RemoteScorer {
    fn name(&self) -> &str {
        "remote-scorer"
    }

    fn classify(
        &self,
        propositions: &[String],
        scheme: &ValueScheme,
    ) -> Result<Vec<ClassifiedProposition>, ValuationError> {
        if propositions.is_empty() {
            return Ok(Vec::new());
        }
        let request = ScoreRequest {
            propositions: propositions.to_vec(),
            descriptors: scheme.values.iter().map(|v| v.descriptor.clone()).collect(),
        };
        let response = self.score(&request)?;
        Ok(propositions
            .iter()
            .zip(response.scores)
            .map(|(p, raw)| classified(p, scheme, softmax(&raw), true, false))
            .collect())
    }
}
