//! Deterministic offline providers.
//!
//! [`MockSummariser`] answers every prompt the harness sends (summaries,
//! agent stages, decomposition, classification) from the known labels of the
//! registered collections. [`ScriptedProvider`] replays replies from a JSON
//! script. [`InstrumentedProvider`] wraps any provider to count calls and
//! measure concurrency.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{GatewayError, GenerationParams, Provider, ProviderReply};
use crate::corpus::Collection;
use crate::pipeline::{parse_frequency_claim, FrequencyClaim};
use crate::promptkit::RenderedPrompt;

/// One simple sentence stating `label` for a single document.
pub fn opinion_sentence(collection: &Collection, label: &str) -> String {
    format!(
        "One {} expresses a {} opinion about {}.",
        collection.scheme.noun.singular, label, collection.topic
    )
}

/// One sentence per source document, in document order, carrying that
/// document's label. The summary's proposition distribution equals the source's.
pub fn mock_faithful_summariser(collection: &Collection) -> String {
    collection
        .documents
        .iter()
        .map(|d| opinion_sentence(collection, &d.value_label))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Label with the most documents; ties go to the earlier scheme value.
pub fn majority_label(collection: &Collection) -> &str {
    let counts = collection.label_counts();
    let best = counts
        .iter()
        .enumerate()
        .fold(0, |best, (i, &c)| if c > counts[best] { i } else { best });
    &collection.scheme.values[best].label
}

/// As many sentences as documents, all carrying the majority label.
pub fn mock_majority_summary(collection: &Collection) -> String {
    let label = majority_label(collection);
    vec![opinion_sentence(collection, label); collection.size()].join(" ")
}

/// Sentences in scheme order, `counts[label]` of each.
pub fn summary_for_counts(collection: &Collection, claim: &FrequencyClaim) -> String {
    collection
        .scheme
        .labels()
        .flat_map(|l| {
            let n = claim.counts.get(l).copied().unwrap_or(0);
            std::iter::repeat_n(opinion_sentence(collection, l), n)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Splits text into sentences at `.`, `!` or `?` followed by whitespace, and at newlines.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '\n' {
            push_trimmed(&mut out, &mut current);
            continue;
        }
        current.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            push_trimmed(&mut out, &mut current);
        }
    }
    push_trimmed(&mut out, &mut current);
    out
}

fn push_trimmed(out: &mut Vec<String>, current: &mut String) {
    let s = current.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    current.clear();
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockBehaviour {
    /// Always mirrors the source distribution.
    Faithful,
    /// Every summary sentence carries the majority label.
    MajorityOnly,
    /// Mirrors the source when the prompt carries frequency instructions or
    /// explicit counts; otherwise behaves like `MajorityOnly`.
    FrequencyAware,
}

impl std::str::FromStr for MockBehaviour {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "faithful" => Ok(Self::Faithful),
            "majority-only" | "majority" => Ok(Self::MajorityOnly),
            "frequency-aware" => Ok(Self::FrequencyAware),
            other => Err(format!("unknown mock behaviour `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PromptKind {
    Decomposition,
    Classification,
    FrequencyAgent,
    Judge,
    Editor,
    Summary,
}

fn prompt_kind(text: &str) -> PromptKind {
    if text.starts_with("Split the following sentences into simple propositions") {
        PromptKind::Decomposition
    } else if text.starts_with("Classify the following statement") {
        PromptKind::Classification
    } else if text.starts_with("You are a classification expert") {
        PromptKind::FrequencyAgent
    } else if text.starts_with("You are a validation expert") {
        PromptKind::Judge
    } else if text.starts_with("You are a senior editor") {
        PromptKind::Editor
    } else {
        PromptKind::Summary
    }
}

fn carries_frequency_instruction(text: &str) -> bool {
    (text.contains("how many") && text.contains(" out of "))
        || text.contains("generate a balanced summary reflecting this distribution")
}

fn claim_line(collection: &Collection) -> String {
    FrequencyClaim::from_collection(collection).render(&collection.scheme)
}

/// Offline summariser keyed by collection id.
pub struct MockSummariser {
    behaviour: MockBehaviour,
    collections: HashMap<String, Collection>,
}

impl MockSummariser {
    pub fn new(
        behaviour: MockBehaviour,
        collections: impl IntoIterator<Item = Collection>,
    ) -> Self {
        Self {
            behaviour,
            collections: collections.into_iter().map(|c| (c.id.clone(), c)).collect(),
        }
    }

    pub fn behaviour(&self) -> MockBehaviour {
        self.behaviour
    }

    fn collection(&self, id: &str) -> Result<&Collection, GatewayError> {
        self.collections
            .get(id)
            .ok_or_else(|| GatewayError::Provider {
                status: 404,
                body: format!("mock has no collection `{id}`"),
            })
    }

    fn summary(&self, collection: &Collection, text: &str) -> String {
        let informed = carries_frequency_instruction(text);
        let faithful = match self.behaviour {
            MockBehaviour::Faithful => true,
            MockBehaviour::MajorityOnly => false,
            MockBehaviour::FrequencyAware => informed,
        };
        let body = if faithful {
            mock_faithful_summariser(collection)
        } else {
            mock_majority_summary(collection)
        };
        if text.contains("First, provide the counts in this format") {
            format!("{}\n\n{body}", claim_line(collection))
        } else {
            body
        }
    }

    fn edit(&self, collection: &Collection, text: &str) -> String {
        if self.behaviour == MockBehaviour::MajorityOnly {
            return mock_majority_summary(collection);
        }
        let claim = text
            .lines()
            .find_map(|l| l.strip_prefix("Opinion frequency distribution:"))
            .and_then(|l| parse_frequency_claim(l, &collection.scheme, collection.size()).ok());
        match claim {
            Some(claim) => summary_for_counts(collection, &claim),
            None => mock_faithful_summariser(collection),
        }
    }
}

fn decompose_reply(text: &str) -> String {
    let summary = text.split_once("Sentences: ").map(|(_, s)| s).unwrap_or("");
    split_sentences(summary)
        .into_iter()
        .map(|s| format!("- {s}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Answers with the first category label that occurs in the statement.
fn classify_reply(text: &str) -> String {
    let (head, statement) = text.split_once("Statement: ").unwrap_or((text, ""));
    let labels: Vec<&str> = head
        .lines()
        .filter_map(|l| l.strip_prefix("- "))
        .filter_map(|l| l.split_once(':').map(|(label, _)| label.trim()))
        .collect();
    let lowered = statement.to_lowercase();
    labels
        .iter()
        .find(|l| lowered.contains(&l.to_lowercase()))
        .or(labels.first())
        .map(|l| l.to_string())
        .unwrap_or_default()
}

impl Provider for MockSummariser {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(
        &self,
        prompt: &RenderedPrompt,
        _params: &GenerationParams,
    ) -> Result<ProviderReply, GatewayError> {
        let text = prompt.user_text.as_str();
        let reply = match prompt_kind(text) {
            PromptKind::Decomposition => decompose_reply(text),
            PromptKind::Classification => classify_reply(text),
            PromptKind::FrequencyAgent => claim_line(self.collection(&prompt.collection_id)?),
            PromptKind::Judge => {
                "The summary should reflect every opinion class in proportion to the \
                 frequency distribution."
                    .to_string()
            }
            PromptKind::Editor => self.edit(self.collection(&prompt.collection_id)?, text),
            PromptKind::Summary => self.summary(self.collection(&prompt.collection_id)?, text),
        };
        Ok(ProviderReply::text(reply))
    }
}

/// Error injected by a script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScriptedError {
    Transport,
    Timeout,
    RateLimited,
    Auth,
    Status { status: u16, body: String },
}

impl From<&ScriptedError> for GatewayError {
    fn from(e: &ScriptedError) -> Self {
        match e {
            ScriptedError::Transport => {
                GatewayError::Transport("scripted transport failure".into())
            }
            ScriptedError::Timeout => GatewayError::Timeout,
            ScriptedError::RateLimited => GatewayError::RateLimited { attempts: 1 },
            ScriptedError::Auth => GatewayError::Auth("scripted auth failure".into()),
            ScriptedError::Status { status, body } => GatewayError::Provider {
                status: *status,
                body: body.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptOutcome {
    Reply(String),
    Error(ScriptedError),
}

impl ScriptOutcome {
    fn resolve(&self) -> Result<ProviderReply, GatewayError> {
        match self {
            ScriptOutcome::Reply(text) => Ok(ProviderReply::text(text.clone())),
            ScriptOutcome::Error(e) => Err(e.into()),
        }
    }
}

/// A prompt matcher paired with its outcome. With no matcher the rule matches everything.
#[derive(Debug, Clone, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub contains: Option<String>,
    #[serde(default)]
    pub prefix: Option<String>,
    #[serde(default)]
    pub regex: Option<String>,
    #[serde(flatten)]
    pub outcome: ScriptOutcome,
}

#[derive(Debug, Clone, Deserialize)]
struct ScriptFile {
    #[serde(default)]
    rules: Vec<ScriptRule>,
    #[serde(default)]
    sequence: Vec<ScriptOutcome>,
    #[serde(default)]
    default: Option<ScriptOutcome>,
}

struct CompiledRule {
    contains: Option<String>,
    prefix: Option<String>,
    regex: Option<Regex>,
    outcome: ScriptOutcome,
}

impl CompiledRule {
    fn matches(&self, text: &str) -> bool {
        self.contains.as_deref().is_none_or(|c| text.contains(c))
            && self.prefix.as_deref().is_none_or(|p| text.starts_with(p))
            && self.regex.as_ref().is_none_or(|r| r.is_match(text))
    }
}

/// Replays replies from a script: matching rules first, then the `sequence`
/// in call order, then `default`.
pub struct ScriptedProvider {
    rules: Vec<CompiledRule>,
    sequence: Vec<ScriptOutcome>,
    next: AtomicUsize,
    default: Option<ScriptOutcome>,
}

impl ScriptedProvider {
    pub fn from_json(json: &str) -> Result<Self, String> {
        let file: ScriptFile = serde_json::from_str(json).map_err(|e| e.to_string())?;
        let rules = file
            .rules
            .into_iter()
            .map(|r| {
                let regex = r
                    .regex
                    .as_deref()
                    .map(Regex::new)
                    .transpose()
                    .map_err(|e| e.to_string())?;
                Ok(CompiledRule {
                    contains: r.contains,
                    prefix: r.prefix,
                    regex,
                    outcome: r.outcome,
                })
            })
            .collect::<Result<_, String>>()?;
        Ok(Self {
            rules,
            sequence: file.sequence,
            next: AtomicUsize::new(0),
            default: file.default,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text)
    }

    /// Script whose rules match on substrings: `(needle, reply)`.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self {
            rules: pairs
                .into_iter()
                .map(|(needle, reply)| CompiledRule {
                    contains: Some(needle.into()),
                    prefix: None,
                    regex: None,
                    outcome: ScriptOutcome::Reply(reply.into()),
                })
                .collect(),
            sequence: Vec::new(),
            next: AtomicUsize::new(0),
            default: None,
        }
    }
}

impl Provider for ScriptedProvider {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(
        &self,
        prompt: &RenderedPrompt,
        _params: &GenerationParams,
    ) -> Result<ProviderReply, GatewayError> {
        if let Some(rule) = self.rules.iter().find(|r| r.matches(&prompt.user_text)) {
            return rule.outcome.resolve();
        }
        let i = self.next.fetch_add(1, Ordering::SeqCst);
        if let Some(outcome) = self.sequence.get(i) {
            return outcome.resolve();
        }
        match &self.default {
            Some(outcome) => outcome.resolve(),
            None => Err(GatewayError::Provider {
                status: 404,
                body: "no scripted reply matches the prompt".into(),
            }),
        }
    }
}

/// Replies with the prompt text itself.
pub struct EchoProvider;

impl Provider for EchoProvider {
    fn name(&self) -> &str {
        "echo"
    }

    fn complete(
        &self,
        prompt: &RenderedPrompt,
        _params: &GenerationParams,
    ) -> Result<ProviderReply, GatewayError> {
        Ok(ProviderReply::text(prompt.user_text.clone()))
    }
}

type DelayFn = dyn Fn(&RenderedPrompt) -> Duration + Send + Sync;

/// Counts calls and tracks peak concurrency of the wrapped provider.
pub struct InstrumentedProvider {
    inner: Arc<dyn Provider>,
    delay: Option<Box<DelayFn>>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl InstrumentedProvider {
    pub fn new(inner: Arc<dyn Provider>) -> Self {
        Self {
            inner,
            delay: None,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn echo() -> Self {
        Self::new(Arc::new(EchoProvider))
    }

    /// Sleeps for `delay(prompt)` inside every call.
    pub fn with_delay(
        mut self,
        delay: impl Fn(&RenderedPrompt) -> Duration + Send + Sync + 'static,
    ) -> Self {
        self.delay = Some(Box::new(delay));
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl Provider for InstrumentedProvider {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(
        &self,
        prompt: &RenderedPrompt,
        params: &GenerationParams,
    ) -> Result<ProviderReply, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        if let Some(delay) = &self.delay {
            thread::sleep(delay(prompt));
        }
        let out = self.inner.complete(prompt, params);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}
