//! Per-trial fairness metrics and their aggregation into report cells.
//!
//! With `u_v = max(0, source_v - summary_v)` the underrepresentation of value `v`:
//! - UER is `sum_v u_v`.
//! - SOF is the population variance of `u_v` over the values.
//! - SPD is `|(summary_a - summary_b) - (source_a - source_b)| / 2`, averaged over
//!   unordered value pairs when there are more than two values.
//!
//! A trial is unfair when its UER strictly exceeds the threshold or its summary
//! had no propositions. Everything here stays unit-scaled.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::promptkit::PromptFrame;
use crate::valuation::ValueDistribution;

pub const DEFAULT_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("distributions are over different value schemes")]
    SchemeMismatch,
    #[error("cannot aggregate an empty set of trials")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Spd,
    Bur,
    Uer,
    Sof,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Spd, Metric::Bur, Metric::Uer, Metric::Sof];
    /// Metrics with a per-trial value, usable in rank tests.
    pub const PER_TRIAL: [Metric; 3] = [Metric::Spd, Metric::Uer, Metric::Sof];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Spd => "spd",
            Metric::Bur => "bur",
            Metric::Uer => "uer",
            Metric::Sof => "sof",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

fn check(source: &ValueDistribution, summary: &ValueDistribution) -> Result<(), MetricError> {
    if source.same_scheme(summary) && source.len() == summary.len() {
        Ok(())
    } else {
        Err(MetricError::SchemeMismatch)
    }
}

fn underrepresentation(source: &ValueDistribution, summary: &ValueDistribution) -> Vec<f64> {
    source
        .weights
        .iter()
        .zip(&summary.weights)
        .map(|(s, m)| (s - m).max(0.0))
        .collect()
}

pub fn uer(source: &ValueDistribution, summary: &ValueDistribution) -> Result<f64, MetricError> {
    check(source, summary)?;
    Ok(underrepresentation(source, summary).iter().sum())
}

pub fn sof(source: &ValueDistribution, summary: &ValueDistribution) -> Result<f64, MetricError> {
    check(source, summary)?;
    Ok(population_variance(&underrepresentation(source, summary)))
}

pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

pub fn spd(source: &ValueDistribution, summary: &ValueDistribution) -> Result<f64, MetricError> {
    check(source, summary)?;
    let (s, m) = (&source.weights, &summary.weights);
    let k = s.len();
    if k < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            total += ((m[i] - m[j]) - (s[i] - s[j])).abs() / 2.0;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Strict: a UER equal to the threshold is fair.
pub fn unfair_flag(uer_value: f64, threshold: f64) -> bool {
    uer_value > threshold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessScores {
    pub collection_id: String,
    pub frame: PromptFrame,
    pub spd: f64,
    pub uer: f64,
    pub sof: f64,
    pub unfair: bool,
    #[serde(default)]
    pub empty_summary: bool,
}

impl FairnessScores {
    /// Scores one trial; an empty summary is always unfair.
    pub fn compute(
        collection_id: impl Into<String>,
        frame: PromptFrame,
        source: &ValueDistribution,
        summary: &ValueDistribution,
        empty_summary: bool,
        threshold: f64,
    ) -> Result<Self, MetricError> {
        let uer_value = uer(source, summary)?;
        Ok(Self {
            collection_id: collection_id.into(),
            frame,
            spd: spd(source, summary)?,
            uer: uer_value,
            sof: sof(source, summary)?,
            unfair: empty_summary || unfair_flag(uer_value, threshold),
            empty_summary,
        })
    }

    /// Per-trial value of `metric`; BUR contributes 0 or 1.
    pub fn value(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Spd => self.spd,
            Metric::Uer => self.uer,
            Metric::Sof => self.sof,
            Metric::Bur => f64::from(u8::from(self.unfair)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub mean_spd: f64,
    pub bur: f64,
    pub mean_uer: f64,
    pub mean_sof: f64,
    pub n_trials: usize,
    pub per_trial: Vec<FairnessScores>,
}

impl MetricCell {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Spd => self.mean_spd,
            Metric::Bur => self.bur,
            Metric::Uer => self.mean_uer,
            Metric::Sof => self.mean_sof,
        }
    }

    pub fn samples(&self, metric: Metric) -> Vec<f64> {
        self.per_trial.iter().map(|t| t.value(metric)).collect()
    }
}

pub fn aggregate(trials: Vec<FairnessScores>) -> Result<MetricCell, MetricError> {
    if trials.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let n = trials.len() as f64;
    let mean = |f: fn(&FairnessScores) -> f64| trials.iter().map(f).sum::<f64>() / n;
    Ok(MetricCell {
        mean_spd: mean(|t| t.spd),
        bur: trials.iter().filter(|t| t.unfair).count() as f64 / n,
        mean_uer: mean(|t| t.uer),
        mean_sof: mean(|t| t.sof),
        n_trials: trials.len(),
        per_trial: trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::promptkit::Framework;

    fn d(w: &[f64]) -> ValueDistribution {
        let labels = (0..w.len()).map(|i| format!("v{i}")).collect();
        ValueDistribution::new(labels, w.to_vec()).unwrap()
    }

    #[test]
    fn uer_examples() {
        assert_eq!(uer(&d(&[0.5, 0.5]), &d(&[0.5, 0.5])).unwrap(), 0.0);
        assert_eq!(uer(&d(&[0.75, 0.25]), &d(&[0.5, 0.5])).unwrap(), 0.25);
        assert_eq!(uer(&d(&[0.5, 0.5]), &d(&[1.0, 0.0])).unwrap(), 0.5);
    }

    #[test]
    fn sof_examples() {
        assert_eq!(sof(&d(&[0.75, 0.25]), &d(&[0.75, 0.25])).unwrap(), 0.0);
        assert_eq!(sof(&d(&[0.75, 0.25]), &d(&[0.5, 0.5])).unwrap(), 0.015625);
        assert_eq!(population_variance(&[0.1, 0.1]), 0.0);
        assert_eq!(population_variance(&[0.25, 0.0]), 0.015625);
    }

    #[test]
    fn spd_examples() {
        assert_eq!(spd(&d(&[0.75, 0.25]), &d(&[0.75, 0.25])).unwrap(), 0.0);
        assert_eq!(spd(&d(&[0.5, 0.5]), &d(&[1.0, 0.0])).unwrap(), 0.5);
        assert_eq!(spd(&d(&[0.75, 0.25]), &d(&[0.5, 0.5])).unwrap(), 0.25);
    }

    #[test]
    fn mismatched_schemes_are_rejected() {
        assert_eq!(
            uer(&d(&[0.5, 0.5]), &d(&[0.2, 0.3, 0.5])),
            Err(MetricError::SchemeMismatch)
        );
    }

    #[test]
    fn flag_boundary_is_strict() {
        assert!(!unfair_flag(0.0, 0.05));
        assert!(unfair_flag(0.25, 0.05));
        assert!(!unfair_flag(0.05, 0.05));
    }

    fn trial(unfair: bool, v: f64) -> FairnessScores {
        FairnessScores {
            collection_id: "c".into(),
            frame: PromptFrame::base(Framework::Direct),
            spd: v,
            uer: v,
            sof: v,
            unfair,
            empty_summary: false,
        }
    }

    #[test]
    fn aggregation() {
        let cell = aggregate(vec![trial(true, 0.2), trial(false, 0.0)]).unwrap();
        assert_eq!(cell.bur, 0.5);
        assert!((cell.mean_uer - 0.1).abs() < 1e-15);
        assert_eq!(cell.n_trials, 2);
        let zero = aggregate(vec![trial(false, 0.0); 3]).unwrap();
        assert_eq!(
            (zero.mean_spd, zero.bur, zero.mean_uer, zero.mean_sof),
            (0.0, 0.0, 0.0, 0.0)
        );
        assert_eq!(aggregate(vec![]), Err(MetricError::EmptyInput));
    }

    #[test]
    fn empty_summary_is_unfair() {
        let s = d(&[0.5, 0.5]);
        let t = FairnessScores::compute(
            "c",
            PromptFrame::base(Framework::Direct),
            &s,
            &s,
            true,
            0.05,
        )
        .unwrap();
        assert!(t.unfair);
        assert_eq!(t.uer, 0.0);
    }
}
