//! Proposition classification into value classes and value distributions.

mod lexicon;
mod remote;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lexicon::{tokenize, Lexicon};
pub use remote::{softmax, RemoteScorer, ScoreRequest, ScoreResponse};

use crate::corpus::{Collection, ValueScheme};
use crate::llmgateway::{Gateway, GatewayError, GenerationParams};
use crate::promptkit::{self, PromptFrame, RenderedPrompt};

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ValuationError {
    #[error("classifier backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("scorer failed on proposition {index}: {reason}")]
    Scorer { index: usize, reason: String },
    #[error("scorer response is malformed: {0}")]
    MalformedResponse(String),
    #[error("classification call failed on proposition {index}: {source}")]
    Gateway {
        index: usize,
        #[source]
        source: GatewayError,
    },
    #[error("lexicon error: {0}")]
    Lexicon(String),
    #[error("distributions are over different value schemes")]
    SchemeMismatch,
    #[error("weights do not form a distribution: {0}")]
    NotADistribution(String),
}

/// Normalised weights over a scheme's values, in scheme order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueDistribution {
    pub labels: Vec<String>,
    pub weights: Vec<f64>,
}

impl ValueDistribution {
    pub fn new(labels: Vec<String>, weights: Vec<f64>) -> Result<Self, ValuationError> {
        if labels.len() != weights.len() || labels.is_empty() {
            return Err(ValuationError::NotADistribution(format!(
                "{} labels vs {} weights",
                labels.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ValuationError::NotADistribution(
                "weights must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(ValuationError::NotADistribution(format!(
                "weights sum to {sum}"
            )));
        }
        Ok(Self { labels, weights })
    }

    pub fn uniform(scheme: &ValueScheme) -> Self {
        let k = scheme.len();
        Self {
            labels: scheme.labels().map(str::to_string).collect(),
            weights: vec![1.0 / k as f64; k],
        }
    }

    /// `counts / total`; all-zero counts give the uniform distribution.
    pub fn from_counts(scheme: &ValueScheme, counts: &[usize]) -> Self {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Self::uniform(scheme);
        }
        Self {
            labels: scheme.labels().map(str::to_string).collect(),
            weights: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn same_scheme(&self, other: &Self) -> bool {
        self.labels == other.labels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedProposition {
    pub text: String,
    /// Normalised per-value scores in scheme order.
    pub scores: Vec<f64>,
    pub label: String,
    /// Scores are graded rather than one-hot.
    pub soft: bool,
    /// No evidence for any value; scores are uniform and the label is the first value.
    pub zero_evidence: bool,
}

/// Index of the largest score; ties resolve to the earliest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, &s)| if s > scores[best] { i } else { best })
}

pub(crate) fn classified(
    text: &str,
    scheme: &ValueScheme,
    scores: Vec<f64>,
    soft: bool,
    zero_evidence: bool,
) -> ClassifiedProposition {
    let label = scheme.values[argmax_first(&scores)].label.clone();
    ClassifiedProposition {
        text: text.to_string(),
        scores,
        label,
        soft,
        zero_evidence,
    }
}

pub trait Classifier: Sync {
    fn name(&self) -> &str;

    fn classify(
        &self,
        propositions: &[String],
        scheme: &ValueScheme,
    ) -> Result<Vec<ClassifiedProposition>, ValuationError>;
}

/// Asks a chat model for one label per proposition.
pub struct LlmJudgeClassifier<'a> {
    gateway: &'a Gateway,
    params: GenerationParams,
}

impl<'a> LlmJudgeClassifier<'a> {
    pub fn new(gateway: &'a Gateway, params: GenerationParams) -> Self {
        Self { gateway, params }
    }
}

/// The scheme label named in a model reply: an exact match first, else the
/// earliest whole-token mention (longest label at equal positions).
pub fn label_in_reply(reply: &str, scheme: &ValueScheme) -> Option<usize> {
    let lowered = reply.trim().trim_end_matches('.').to_lowercase();
    if let Some(i) = scheme.labels().position(|l| l.to_lowercase() == lowered) {
        return Some(i);
    }
    let tokens = tokenize(&lowered);
    tokens.iter().find_map(|tok| {
        scheme
            .labels()
            .enumerate()
            .filter(|(_, l)| l.to_lowercase() == *tok)
            .max_by_key(|(_, l)| l.len())
            .map(|(i, _)| i)
    })
}

impl Classifier for LlmJudgeClassifier<'_> {
    fn name(&self) -> &str {
        "llm-judge"
    }

    fn classify(
        &self,
        propositions: &[String],
        scheme: &ValueScheme,
    ) -> Result<Vec<ClassifiedProposition>, ValuationError> {
        let prompts: Vec<RenderedPrompt> = propositions
            .iter()
            .map(|p| RenderedPrompt {
                system_text: None,
                user_text: promptkit::render_classification(p, scheme),
                frame: PromptFrame::base(promptkit::Framework::Direct),
                collection_id: String::new(),
            })
            .collect();
        let replies =
            self.gateway
                .complete_batch(&prompts, &self.params, self.gateway.max_in_flight());
        replies
            .into_iter()
            .zip(propositions)
            .enumerate()
            .map(|(index, (reply, text))| {
                let reply = reply.map_err(|source| ValuationError::Gateway { index, source })?;
                let k = scheme.len();
                Ok(match label_in_reply(&reply.output_text, scheme) {
                    Some(i) => {
                        let mut scores = vec![0.0; k];
                        scores[i] = 1.0;
                        classified(text, scheme, scores, false, false)
                    }
                    None => classified(text, scheme, vec![1.0 / k as f64; k], false, true),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionMode {
    #[default]
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryDistribution {
    pub distribution: ValueDistribution,
    /// No propositions were available; the distribution is uniform.
    pub empty_summary: bool,
    pub zero_evidence: usize,
}

/// Hard mode: normalised label counts. Soft mode: mean score vector.
pub fn summary_distribution(
    classified: &[ClassifiedProposition],
    scheme: &ValueScheme,
    mode: DistributionMode,
) -> SummaryDistribution {
    let zero_evidence = classified.iter().filter(|c| c.zero_evidence).count();
    if classified.is_empty() {
        return SummaryDistribution {
            distribution: ValueDistribution::uniform(scheme),
            empty_summary: true,
            zero_evidence,
        };
    }
    let distribution = match mode {
        DistributionMode::Hard => {
            let mut counts = vec![0usize; scheme.len()];
            for c in classified {
                if let Some(i) = scheme.index_of(&c.label) {
                    counts[i] += 1;
                }
            }
            ValueDistribution::from_counts(scheme, &counts)
        }
        DistributionMode::Soft => {
            let n = classified.len() as f64;
            let mut weights = vec![0.0; scheme.len()];
            for c in classified {
                for (w, s) in weights.iter_mut().zip(&c.scores) {
                    *w += s;
                }
            }
            weights.iter_mut().for_each(|w| *w /= n);
            ValueDistribution {
                labels: scheme.labels().map(str::to_string).collect(),
                weights,
            }
        }
    };
    SummaryDistribution {
        distribution,
        empty_summary: false,
        zero_evidence,
    }
}

/// The collection's declared proportion, normalised.
pub fn source_distribution(collection: &Collection) -> ValueDistribution {
    ValueDistribution::from_counts(
        &collection.scheme,
        &collection.proportion.aligned(&collection.scheme),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prop(label: &str) -> ClassifiedProposition {
        let s = ValueScheme::sentiment();
        let i = s.index_of(label).unwrap();
        let mut scores = vec![0.0; 2];
        scores[i] = 1.0;
        classified("x", &s, scores, false, false)
    }

    #[test]
    fn hard_mode_counts() {
        let s = ValueScheme::sentiment();
        let d = summary_distribution(
            &["positive", "positive", "negative", "negative"].map(prop),
            &s,
            DistributionMode::Hard,
        );
        assert_eq!(d.distribution.weights, vec![0.5, 0.5]);
        let mut six_two: Vec<_> = (0..6).map(|_| prop("positive")).collect();
        six_two.extend((0..2).map(|_| prop("negative")));
        let d = summary_distribution(&six_two, &s, DistributionMode::Hard);
        assert_eq!(d.distribution.weights, vec![0.75, 0.25]);
    }

    #[test]
    fn empty_summary_is_uniform_and_flagged() {
        let s = ValueScheme::sentiment();
        let d = summary_distribution(&[], &s, DistributionMode::Hard);
        assert!(d.empty_summary);
        assert_eq!(d.distribution.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn soft_mode_averages_scores() {
        let s = ValueScheme::sentiment();
        let a = classified("a", &s, vec![0.9, 0.1], true, false);
        let b = classified("b", &s, vec![0.3, 0.7], true, false);
        let d = summary_distribution(&[a, b], &s, DistributionMode::Soft);
        assert!((d.distribution.weights[0] - 0.6).abs() < 1e-12);
        assert!((d.distribution.weights[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_pick_first() {
        assert_eq!(argmax_first(&[0.5, 0.5]), 0);
        assert_eq!(argmax_first(&[0.2, 0.4, 0.4]), 1);
        let s = ValueScheme::sentiment();
        assert_eq!(
            classified("r", &s, vec![0.9, 0.1], true, false).label,
            "positive"
        );
    }

    #[test]
    fn reply_label_extraction() {
        let s = ValueScheme::sentiment();
        assert_eq!(label_in_reply("Negative.", &s), Some(1));
        assert_eq!(label_in_reply("The label is: positive", &s), Some(0));
        assert_eq!(label_in_reply("I cannot tell", &s), None);
    }

    #[test]
    fn distribution_validation() {
        let labels = vec!["a".to_string(), "b".to_string()];
        assert!(ValueDistribution::new(labels.clone(), vec![0.5, 0.5]).is_ok());
        assert!(ValueDistribution::new(labels.clone(), vec![0.6, 0.5]).is_err());
        assert!(ValueDistribution::new(labels, vec![1.5, -0.5]).is_err());
    }
}
