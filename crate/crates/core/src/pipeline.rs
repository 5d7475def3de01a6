//! Runs one summarisation trial: prompt, model call(s), proposition decomposition.

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{word_count, Collection, Regime, ValueScheme};
use crate::llmgateway::{CompletionRecord, Gateway, GatewayError, GenerationParams};
use crate::promptkit::{self, AgentContext, AgentStage, PromptError, PromptFrame, RenderedPrompt};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage} stage failed: {source}")]
    Gateway {
        stage: String,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("decomposition returned no propositions for a non-empty summary")]
    DecompositionEmpty,
    #[error("no frequency claim found in `{0}`")]
    FrequencyParse(String),
    #[error("frequency claim totals {total}, more than the {n} documents")]
    CountOverflow { total: u128, n: usize },
}

fn gateway_err(stage: &str) -> impl FnOnce(GatewayError) -> PipelineError + '_ {
    move |source| PipelineError::Gateway {
        stage: stage.to_string(),
        source,
    }
}

/// Per-label counts reported by the frequency agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyClaim {
    pub counts: IndexMap<String, usize>,
    pub raw_text: String,
}

impl FrequencyClaim {
    /// The true counts of a collection.
    pub fn from_collection(collection: &Collection) -> Self {
        let counts: IndexMap<String, usize> = collection
            .scheme
            .labels()
            .map(str::to_string)
            .zip(collection.label_counts())
            .collect();
        let mut claim = Self {
            counts,
            raw_text: String::new(),
        };
        claim.raw_text = claim.render(&collection.scheme);
        claim
    }

    /// `{positive #6, negative #2}` in scheme order.
    pub fn render(&self, scheme: &ValueScheme) -> String {
        let parts: Vec<String> = scheme
            .labels()
            .map(|l| format!("{l} #{}", self.counts.get(l).copied().unwrap_or(0)))
            .collect();
        format!("{{{}}}", parts.join(", "))
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

fn label_pattern(label: &str) -> Regex {
    Regex::new(&format!(
        r"(?i)(?:^|[^\w-]){}\s*#\s*(\d+)",
        regex::escape(label)
    ))
    .expect("escaped label forms a valid pattern")
}

/// Extracts per-label counts from agent output.
///
/// The first `{...}` group holding any `<label> #<digits>` pair is used;
/// failing that, the first `<label> #<digits>` occurrence of each label
/// anywhere in the text. Matching is case-insensitive and labels missing from
/// the matched region count as zero.
pub fn parse_frequency_claim(
    text: &str,
    scheme: &ValueScheme,
    n: usize,
) -> Result<FrequencyClaim, PipelineError> {
    let patterns: Vec<Regex> = scheme.labels().map(label_pattern).collect();
    let extract = |region: &str| -> Option<Vec<Option<u128>>> {
        let found: Vec<Option<u128>> = patterns
            .iter()
            .map(|re| {
                re.captures(region).map(|c| {
                    // digits too long for u128 still overflow any realistic n
                    c[1].parse::<u128>().unwrap_or(u128::MAX)
                })
            })
            .collect();
        found.iter().any(Option::is_some).then_some(found)
    };

    let braces = Regex::new(r"\{([^{}]*)\}").expect("static pattern");
    let found = braces
        .captures_iter(text)
        .find_map(|c| extract(c.get(1).unwrap().as_str()))
        .or_else(|| extract(text))
        .ok_or_else(|| PipelineError::FrequencyParse(excerpt(text)))?;

    let total = found
        .iter()
        .flatten()
        .fold(0u128, |acc, &v| acc.saturating_add(v));
    if total > n as u128 {
        return Err(PipelineError::CountOverflow { total, n });
    }
    Ok(FrequencyClaim {
        counts: scheme
            .labels()
            .map(str::to_string)
            .zip(found.into_iter().map(|v| v.unwrap_or(0) as usize))
            .collect(),
        raw_text: text.to_string(),
    })
}

fn excerpt(text: &str) -> String {
    let t: String = text.chars().take(80).collect();
    if t.len() < text.len() {
        format!("{t}…")
    } else {
        t
    }
}

/// One proposition per non-empty line, with list markers, numbering and quotes stripped.
pub fn parse_propositions(output: &str) -> Vec<String> {
    let marker =
        Regex::new(r"^(?:[-*•·–—+]+\s*|\(?\d{1,3}[.)]\s+|\(\d{1,3}\)\s*)").expect("static pattern");
    const QUOTES: [char; 7] = ['"', '\'', '“', '”', '‘', '’', '`'];
    output
        .lines()
        .filter_map(|line| {
            let line = line.trim();
            let line = marker.replace(line, "");
            let line = line.trim();
            let unquoted = line.trim_start_matches(QUOTES);
            let line = if unquoted.len() != line.len() {
                unquoted.trim_end_matches(QUOTES)
            } else {
                line
            };
            let line = line.trim();
            (!line.is_empty()).then(|| line.to_string())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: AgentStage,
    pub completion: CompletionRecord,
}

/// Ordered outputs of the agent stages for one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTranscript {
    pub summary_draft: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<FrequencyClaim>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_feedback: Option<String>,
    pub final_summary: String,
    pub stage_records: Vec<StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub collection_id: String,
    pub regime: Regime,
    pub frame: PromptFrame,
    pub model_id: String,
    pub summary_text: String,
    pub propositions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<AgentTranscript>,
    pub word_count: usize,
    /// The model returned nothing to decompose.
    #[serde(default)]
    pub empty_summary: bool,
}

impl TrialRecord {
    /// Identity of a trial within a run directory.
    pub fn key(&self) -> TrialKey {
        TrialKey {
            model_id: self.model_id.clone(),
            frame: self.frame,
            collection_id: self.collection_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrialKey {
    pub model_id: String,
    pub frame: PromptFrame,
    pub collection_id: String,
}

/// A prompt/output pair kept for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub prompt: String,
    pub output: String,
    pub cached: bool,
}

#[derive(Debug, Clone)]
pub struct TrialRun {
    pub record: TrialRecord,
    pub audit: Vec<StageLog>,
}

pub struct Pipeline<'a> {
    gateway: &'a Gateway,
    decomposer_model: Option<String>,
}

impl<'a> Pipeline<'a> {
    pub fn new(gateway: &'a Gateway) -> Self {
        Self {
            gateway,
            decomposer_model: None,
        }
    }

    /// Model used for proposition splitting; defaults to the model under test.
    pub fn with_decomposer_model(mut self, model: Option<String>) -> Self {
        self.decomposer_model = model;
        self
    }

    fn call(
        &self,
        stage: &str,
        prompt: &RenderedPrompt,
        params: &GenerationParams,
        audit: &mut Vec<StageLog>,
    ) -> Result<CompletionRecord, PipelineError> {
        let rec = self
            .gateway
            .complete(prompt, params)
            .map_err(gateway_err(stage))?;
        audit.push(StageLog {
            stage: stage.to_string(),
            prompt: prompt.user_text.clone(),
            output: rec.output_text.clone(),
            cached: rec.cached,
        });
        Ok(rec)
    }

    pub fn run_trial(
        &self,
        collection: &Collection,
        frame: PromptFrame,
        params: &GenerationParams,
    ) -> Result<TrialRun, PipelineError> {
        frame.validate()?;
        let mut audit = Vec::new();
        let (summary, transcript) = if frame.is_agent() && frame.refer {
            let t = self.agent_refer(collection, params, &mut audit)?;
            (t.final_summary.clone(), Some(t))
        } else {
            let prompt = promptkit::render(frame, collection)?;
            let stage = if frame.is_agent() {
                AgentStage::Summariser.as_str()
            } else {
                "summary"
            };
            let rec = self.call(stage, &prompt, params, &mut audit)?;
            let summary = rec.output_text.clone();
            let transcript = frame.is_agent().then(|| AgentTranscript {
                summary_draft: summary.clone(),
                frequency: None,
                judge_feedback: None,
                final_summary: summary.clone(),
                stage_records: vec![StageRecord {
                    stage: AgentStage::Summariser,
                    completion: rec,
                }],
            });
            (summary, transcript)
        };

        let empty_summary = summary.trim().is_empty();
        let propositions = if empty_summary {
            Vec::new()
        } else {
            self.decompose_with_audit(collection, &summary, params, &mut audit)?
        };

        Ok(TrialRun {
            record: TrialRecord {
                collection_id: collection.id.clone(),
                regime: collection.regime_tag,
                frame,
                model_id: params.model_id.clone(),
                word_count: word_count(&summary),
                summary_text: summary,
                propositions,
                transcript,
                empty_summary,
            },
            audit,
        })
    }

    /// Runs the four agent stages once: summariser, frequency, judge, editor.
    pub fn run_agent_refer(
        &self,
        collection: &Collection,
        params: &GenerationParams,
    ) -> Result<AgentTranscript, PipelineError> {
        self.agent_refer(collection, params, &mut Vec::new())
    }

    fn agent_refer(
        &self,
        collection: &Collection,
        params: &GenerationParams,
        audit: &mut Vec<StageLog>,
    ) -> Result<AgentTranscript, PipelineError> {
        let mut ctx = AgentContext::default();
        let mut records = Vec::with_capacity(4);
        let mut step = |stage: AgentStage,
                        ctx: &AgentContext,
                        audit: &mut Vec<StageLog>|
         -> Result<String, PipelineError> {
            let prompt = promptkit::render_agent_stage(collection, ctx, stage)?;
            let rec = self.call(stage.as_str(), &prompt, params, audit)?;
            let out = rec.output_text.clone();
            records.push(StageRecord {
                stage,
                completion: rec,
            });
            Ok(out)
        };

        ctx.summary = step(AgentStage::Summariser, &ctx, audit)?;
        ctx.frequency = step(AgentStage::Frequency, &ctx, audit)?;
        let claim = parse_frequency_claim(&ctx.frequency, &collection.scheme, collection.size())?;
        ctx.feedback = step(AgentStage::Judge, &ctx, audit)?;
        let final_summary = step(AgentStage::Editor, &ctx, audit)?;

        Ok(AgentTranscript {
            summary_draft: ctx.summary,
            frequency: Some(claim),
            judge_feedback: Some(ctx.feedback),
            final_summary,
            stage_records: records,
        })
    }

    /// Splits a summary into single-opinion propositions via the decomposer model.
    pub fn decompose(
        &self,
        summary_text: &str,
        params: &GenerationParams,
    ) -> Result<Vec<String>, PipelineError> {
        let prompt = promptkit::render_decomposition(summary_text)?;
        self.decompose_prompt(prompt, params, &mut Vec::new())
    }

    fn decompose_with_audit(
        &self,
        collection: &Collection,
        summary_text: &str,
        params: &GenerationParams,
        audit: &mut Vec<StageLog>,
    ) -> Result<Vec<String>, PipelineError> {
        let mut prompt = promptkit::render_decomposition(summary_text)?;
        prompt.collection_id = collection.id.clone();
        self.decompose_prompt(prompt, params, audit)
    }

    fn decompose_prompt(
        &self,
        prompt: RenderedPrompt,
        params: &GenerationParams,
        audit: &mut Vec<StageLog>,
    ) -> Result<Vec<String>, PipelineError> {
        let params = match &self.decomposer_model {
            Some(model) => params.with_model(model.clone()),
            None => params.clone(),
        };
        let rec = self.call("decomposition", &prompt, &params, audit)?;
        let props = parse_propositions(&rec.output_text);
        if props.is_empty() {
            return Err(PipelineError::DecompositionEmpty);
        }
        Ok(props)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scheme() -> ValueScheme {
        ValueScheme::sentiment()
    }

    #[test]
    fn parses_exact_format() {
        let c = parse_frequency_claim("{positive #6, negative #2}", &scheme(), 8).unwrap();
        assert_eq!(c.counts["positive"], 6);
        assert_eq!(c.counts["negative"], 2);
    }

    #[test]
    fn parses_prose_fallback() {
        let c =
            parse_frequency_claim("Positive #4 and negative #4 overall.", &scheme(), 8).unwrap();
        assert_eq!((c.counts["positive"], c.counts["negative"]), (4, 4));
    }

    #[test]
    fn brace_group_wins_over_prose() {
        let text = "I saw positive #1 first. Final: {positive #5, negative #3}";
        let c = parse_frequency_claim(text, &scheme(), 8).unwrap();
        assert_eq!((c.counts["positive"], c.counts["negative"]), (5, 3));
    }

    #[test]
    fn overflow_and_garbage() {
        assert!(matches!(
            parse_frequency_claim("{positive #7, negative #3}", &scheme(), 8),
            Err(PipelineError::CountOverflow { total: 10, n: 8 })
        ));
        assert!(matches!(
            parse_frequency_claim("banana", &scheme(), 8),
            Err(PipelineError::FrequencyParse(_))
        ));
    }

    #[test]
    fn hyphenated_labels_do_not_match_suffixes() {
        let s = crate::corpus::ValueScheme::new(
            "t",
            vec![
                crate::corpus::ValueDef {
                    label: "democrat".into(),
                    descriptor: "d".into(),
                },
                crate::corpus::ValueDef {
                    label: "pro-democrat".into(),
                    descriptor: "p".into(),
                },
            ],
            Default::default(),
        )
        .unwrap();
        let c = parse_frequency_claim("{pro-democrat #3, democrat #2}", &s, 8).unwrap();
        assert_eq!((c.counts["democrat"], c.counts["pro-democrat"]), (2, 3));
    }

    #[test]
    fn proposition_lines() {
        assert_eq!(
            parse_propositions("- A is good.\n- B is bad."),
            vec!["A is good.", "B is bad."]
        );
        assert_eq!(parse_propositions("1. X\n2. Y"), vec!["X", "Y"]);
        assert_eq!(
            parse_propositions("\n* \"Quoted claim.\"\n\n(3) Third\n3.5 stars overall"),
            vec!["Quoted claim.", "Third", "3.5 stars overall"]
        );
        assert!(parse_propositions("\n - \n").is_empty());
    }
}
