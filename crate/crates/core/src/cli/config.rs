//! Declarative experiment configuration, one TOML file per experiment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::corpus::{
    make_proportion, DocumentNoun, LengthFilter, ProportionSpec, Regime, ValueDef, ValueScheme,
};
use crate::llmgateway::mock::MockBehaviour;
use crate::llmgateway::openai::OpenAiConfig;
use crate::llmgateway::GenerationParams;
use crate::promptkit::PromptFrame;
use crate::valuation::DistributionMode;

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub provider: OpenAiConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: PathBuf,
    /// `sentiment`, `political`, or any name when `values` is given.
    #[serde(default = "CorpusConfig::default_scheme")]
    pub scheme: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<ValueDef>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noun: Option<DocumentNoun>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_words: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_words: Option<usize>,
}

impl CorpusConfig {
    fn default_scheme() -> String {
        "sentiment".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default = "SamplingConfig::default_size")]
    pub size: usize,
    #[serde(default = "SamplingConfig::default_n_collections")]
    pub n_collections: usize,
    #[serde(default = "SamplingConfig::default_regimes")]
    pub regimes: Vec<Regime>,
    #[serde(default = "SamplingConfig::default_seed")]
    pub seed: u64,
    /// Per-regime target fractions overriding the defaults, keyed by regime then label.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub fractions: BTreeMap<String, BTreeMap<String, f64>>,
}

impl SamplingConfig {
    fn default_size() -> usize {
        8
    }
    fn default_n_collections() -> usize {
        300
    }
    fn default_regimes() -> Vec<Regime> {
        Regime::ALL.to_vec()
    }
    fn default_seed() -> u64 {
        42
    }
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            size: Self::default_size(),
            n_collections: Self::default_n_collections(),
            regimes: Self::default_regimes(),
            seed: Self::default_seed(),
            fractions: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    #[serde(default)]
    pub models: Vec<String>,
    #[serde(default = "GenerationConfig::default_frames")]
    pub frames: Vec<String>,
    #[serde(default = "GenerationConfig::default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default = "GenerationConfig::default_temperature")]
    pub temperature: f64,
    #[serde(default = "GenerationConfig::default_repetition_penalty")]
    pub repetition_penalty: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "GenerationConfig::default_jobs")]
    pub jobs: usize,
    /// Offline provider: `faithful`, `majority-only`, `frequency-aware` or `script`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decomposer_model: Option<String>,
    /// Response cache location; defaults to `cache/` inside the run directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

impl GenerationConfig {
    fn default_frames() -> Vec<String> {
        PromptFrame::all().iter().map(|f| f.to_string()).collect()
    }
    fn default_max_new_tokens() -> u32 {
        GenerationParams::DEFAULT_MAX_NEW_TOKENS
    }
    fn default_temperature() -> f64 {
        GenerationParams::DEFAULT_TEMPERATURE
    }
    fn default_repetition_penalty() -> f64 {
        GenerationParams::DEFAULT_REPETITION_PENALTY
    }
    fn default_jobs() -> usize {
        4
    }

    pub fn params(&self, model: &str) -> GenerationParams {
        GenerationParams {
            model_id: model.to_string(),
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            repetition_penalty: self.repetition_penalty,
            seed: self.seed,
        }
    }

    /// Configured models, or one model named after the mock when none are given.
    pub fn model_ids(&self) -> Vec<String> {
        if self.models.is_empty() {
            if let Some(mock) = &self.mock {
                return vec![format!("mock-{mock}")];
            }
        }
        self.models.clone()
    }

    pub fn parsed_frames(&self) -> Result<Vec<PromptFrame>, CliError> {
        self.frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                f.parse::<PromptFrame>()
                    .map_err(|e| invalid(format!("generation.frames[{i}]"), e.to_string()))
            })
            .collect()
    }
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            models: Vec::new(),
            frames: Self::default_frames(),
            max_new_tokens: Self::default_max_new_tokens(),
            temperature: Self::default_temperature(),
            repetition_penalty: Self::default_repetition_penalty(),
            seed: None,
            jobs: Self::default_jobs(),
            mock: None,
            mock_script: None,
            decomposer_model: None,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// `lexicon`, `llm-judge` or `remote`.
    #[serde(default = "EvaluationConfig::default_backend")]
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_model: Option<String>,
    #[serde(default)]
    pub mode: DistributionMode,
    #[serde(default = "EvaluationConfig::default_threshold")]
    pub threshold: f64,
    #[serde(default = "EvaluationConfig::default_alpha")]
    pub alpha: f64,
}

impl EvaluationConfig {
    fn default_backend() -> String {
        "lexicon".into()
    }
    fn default_threshold() -> f64 {
        crate::fairmetrics::DEFAULT_THRESHOLD
    }
    fn default_alpha() -> f64 {
        crate::stattools::DEFAULT_ALPHA
    }
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            backend: Self::default_backend(),
            lexicon_dir: None,
            scorer_url: None,
            judge_model: None,
            mode: DistributionMode::default(),
            threshold: Self::default_threshold(),
            alpha: Self::default_alpha(),
        }
    }
}

pub const BACKENDS: [&str; 3] = ["lexicon", "llm-judge", "remote"];

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl Config {
    /// Parses `path`; relative paths inside are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::MissingInput(format!("config {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<document>".into());
            invalid(field, e.to_string().trim_end().to_string())
        })
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.corpus.path);
        for p in [
            self.generation.mock_script.as_mut(),
            self.generation.cache_dir.as_mut(),
            self.evaluation.lexicon_dir.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn scheme(&self) -> Result<ValueScheme, CliError> {
        let c = &self.corpus;
        let mut scheme = match (c.scheme.as_str(), &c.values) {
            (name, Some(values)) => ValueScheme {
                name: name.to_string(),
                values: values.clone(),
                noun: DocumentNoun::default(),
            },
            ("sentiment", None) => ValueScheme::sentiment(),
            ("political", None) => ValueScheme::political(),
            (other, None) => {
                return Err(invalid(
                    "corpus.scheme",
                    format!("unknown scheme `{other}`; give corpus.values for a custom scheme"),
                ))
            }
        };
        if let Some(noun) = &c.noun {
            scheme.noun = noun.clone();
        }
        scheme
            .validate()
            .map_err(|e| invalid("corpus.values", e.to_string()))?;
        Ok(scheme)
    }

    /// Review-length bounds for the sentiment scheme, none otherwise, unless overridden.
    pub fn length_filter(&self) -> LengthFilter {
        let base = if self.corpus.scheme == "sentiment" && self.corpus.values.is_none() {
            LengthFilter::REVIEWS
        } else {
            LengthFilter::unbounded()
        };
        LengthFilter {
            min_words: self.corpus.min_words.unwrap_or(base.min_words),
            max_words: self.corpus.max_words.unwrap_or(base.max_words),
        }
    }

    pub fn proportion(
        &self,
        scheme: &ValueScheme,
        regime: Regime,
    ) -> Result<ProportionSpec, CliError> {
        let spec = match self.sampling.fractions.get(regime.as_str()) {
            Some(fractions) => make_proportion(scheme, self.sampling.size, fractions),
            None => regime.proportion(scheme, self.sampling.size),
        };
        spec.map_err(|e| invalid(format!("sampling.fractions.{regime}"), e.to_string()))
    }

    pub fn mock_behaviour(&self) -> Result<Option<MockBehaviour>, CliError> {
        match self.generation.mock.as_deref() {
            None | Some("script") => Ok(None),
            Some(m) => m
                .parse()
                .map(Some)
                .map_err(|e: String| invalid("generation.mock", e)),
        }
    }

    /// Checks cross-field constraints, naming the offending field.
    pub fn validate(&self) -> Result<(), CliError> {
        let scheme = self.scheme()?;
        let s = &self.sampling;
        if s.size < scheme.len() {
            return Err(invalid(
                "sampling.size",
                format!("must be at least the number of values ({})", scheme.len()),
            ));
        }
        if s.regimes.is_empty() {
            return Err(invalid("sampling.regimes", "must name at least one regime"));
        }
        for key in s.fractions.keys() {
            key.parse::<Regime>()
                .map_err(|e| invalid(format!("sampling.fractions.{key}"), e))?;
        }
        for &r in &s.regimes {
            self.proportion(&scheme, r)?;
        }
        if self.corpus.min_words.unwrap_or(0) > self.corpus.max_words.unwrap_or(usize::MAX) {
            return Err(invalid("corpus.min_words", "exceeds corpus.max_words"));
        }

        let g = &self.generation;
        let frames = g.parsed_frames()?;
        if frames.is_empty() {
            return Err(invalid("generation.frames", "must name at least one frame"));
        }
        if g.jobs == 0 {
            return Err(invalid("generation.jobs", "must be positive"));
        }
        self.mock_behaviour()?;
        if g.mock.as_deref() == Some("script") && g.mock_script.is_none() {
            return Err(invalid(
                "generation.mock_script",
                "required when generation.mock = \"script\"",
            ));
        }
        let models = g.model_ids();
        if models.is_empty() {
            return Err(invalid("generation.models", "must name at least one model"));
        }
        for (i, m) in models.iter().enumerate() {
            g.params(m)
                .validate()
                .map_err(|e| invalid(format!("generation.models[{i}]"), e.to_string()))?;
        }

        let e = &self.evaluation;
        if !BACKENDS.contains(&e.backend.as_str()) {
            return Err(invalid(
                "evaluation.backend",
                format!("must be one of {}", BACKENDS.join(", ")),
            ));
        }
        if e.backend == "remote" && e.scorer_url.is_none() {
            return Err(invalid(
                "evaluation.scorer_url",
                "required for the remote backend",
            ));
        }
        if !(0.0..=1.0).contains(&e.threshold) {
            return Err(invalid("evaluation.threshold", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&e.alpha) {
            return Err(invalid("evaluation.alpha", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> Config {
        Config::from_toml("[corpus]\npath = \"c.jsonl\"\n[generation]\nmock = \"faithful\"\n")
            .unwrap()
    }

    #[test]
    fn defaults_follow_the_protocol() {
        let c = minimal();
        assert_eq!(c.sampling.size, 8);
        assert_eq!(c.sampling.n_collections, 300);
        assert_eq!(c.sampling.regimes, Regime::ALL.to_vec());
        assert_eq!(c.generation.frames.len(), 11);
        assert_eq!(c.generation.model_ids(), vec!["mock-faithful".to_string()]);
        assert_eq!(c.evaluation.threshold, 0.05);
        assert_eq!(c.length_filter(), LengthFilter::REVIEWS);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_fields_name_the_key() {
        let err = Config::from_toml("[corpus]\npath = \"c\"\n[sampling]\nsise = 8\n").unwrap_err();
        match err {
            CliError::Config { field, .. } => assert_eq!(field, "sise"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_errors_carry_field_paths() {
        let mut c = minimal();
        c.sampling.size = 1;
        assert!(
            matches!(c.validate(), Err(CliError::Config { field, .. }) if field == "sampling.size")
        );
        let mut c = minimal();
        c.generation.frames = vec!["direct".into(), "oracle-r".into()];
        assert!(
            matches!(c.validate(), Err(CliError::Config { field, .. }) if field == "generation.frames[1]")
        );
        let mut c = minimal();
        c.evaluation.threshold = 2.0;
        assert!(
            matches!(c.validate(), Err(CliError::Config { field, .. }) if field == "evaluation.threshold")
        );
        let mut c = minimal();
        c.generation.mock = None;
        assert!(
            matches!(c.validate(), Err(CliError::Config { field, .. }) if field == "generation.models")
        );
    }

    #[test]
    fn round_trips_through_toml() {
        let c = minimal();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }
}
