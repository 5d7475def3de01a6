//! Prompt framework registry and template rendering.
//!
//! Templates live in `templates/` as plain text with `{name}` placeholders.
//! Substitution is a single pass over the template, so placeholder-like text
//! inside documents or model outputs is never expanded.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Collection, ValueScheme};

pub const DOCUMENT_SEPARATOR: &str = " || ";

mod templates {
    pub const DIRECT: &str = include_str!("../templates/direct.txt");
    pub const REFER_CLAUSE: &str = include_str!("../templates/refer_clause.txt");
    pub const ORACLE_CLAUSE: &str = include_str!("../templates/oracle_clause.txt");
    pub const PREFIX_INSTRUCT: &str = include_str!("../templates/prefix_instruct.txt");
    pub const PREFIX_ROLE: &str = include_str!("../templates/prefix_role.txt");
    pub const COT: &str = include_str!("../templates/cot.txt");
    pub const AGENT_SUMMARISER: &str = include_str!("../templates/agent_summariser.txt");
    pub const AGENT_REFER_SUMMARISER: &str =
        include_str!("../templates/agent_refer_summariser.txt");
    pub const AGENT_FREQUENCY: &str = include_str!("../templates/agent_frequency.txt");
    pub const AGENT_JUDGE: &str = include_str!("../templates/agent_judge.txt");
    pub const AGENT_EDITOR: &str = include_str!("../templates/agent_editor.txt");
    pub const DECOMPOSITION: &str = include_str!("../templates/decomposition.txt");
    pub const CLASSIFY: &str = include_str!("../templates/classify.txt");
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("collection `{0}` has no documents")]
    EmptyCollection(String),
    #[error("summary text is empty")]
    EmptySummary,
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("unknown frame `{0}`")]
    UnknownFrame(String),
}

/// Prompting framework, in the order frameworks are listed in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    Direct,
    FairPrefix,
    PersonaPrefix,
    Cot,
    Agent,
}

impl Framework {
    pub const ALL: [Framework; 5] = [
        Framework::Direct,
        Framework::FairPrefix,
        Framework::PersonaPrefix,
        Framework::Cot,
        Framework::Agent,
    ];

    fn cli_stem(&self) -> &'static str {
        match self {
            Framework::Direct => "direct",
            Framework::FairPrefix => "prefix-instruct",
            Framework::PersonaPrefix => "prefix-role",
            Framework::Cot => "cot",
            Framework::Agent => "agent",
        }
    }

    fn prefix(&self) -> Option<&'static str> {
        match self {
            Framework::Direct => None,
            Framework::FairPrefix => Some(templates::PREFIX_INSTRUCT),
            Framework::PersonaPrefix => Some(templates::PREFIX_ROLE),
            Framework::Cot => Some(templates::COT),
            Framework::Agent => Some(templates::AGENT_SUMMARISER),
        }
    }
}

/// A prompt-construction strategy: framework, REFER flag, and the oracle variant.
///
/// Ordering follows report listing order: frameworks in order, base before
/// REFER, oracle last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptFrame {
    pub oracle: bool,
    pub framework: Framework,
    pub refer: bool,
}

impl PromptFrame {
    pub const fn base(framework: Framework) -> Self {
        Self {
            framework,
            refer: false,
            oracle: false,
        }
    }

    pub const fn with_refer(framework: Framework) -> Self {
        Self {
            framework,
            refer: true,
            oracle: false,
        }
    }

    pub const fn oracle() -> Self {
        Self {
            framework: Framework::Direct,
            refer: false,
            oracle: true,
        }
    }

    /// All eleven frames: each framework with and without REFER, plus oracle.
    pub fn all() -> Vec<PromptFrame> {
        Framework::ALL
            .iter()
            .flat_map(|&f| [Self::base(f), Self::with_refer(f)])
            .chain(std::iter::once(Self::oracle()))
            .collect()
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.oracle && (self.refer || self.framework != Framework::Direct) {
            return Err(PromptError::InvalidFrame(
                "oracle requires the direct framework without REFER".into(),
            ));
        }
        Ok(())
    }

    pub fn is_agent(&self) -> bool {
        self.framework == Framework::Agent
    }

    /// The base frame this REFER frame is compared against.
    pub fn base_counterpart(&self) -> Option<PromptFrame> {
        (self.refer && !self.oracle).then(|| Self::base(self.framework))
    }

    pub fn refer_counterpart(&self) -> Option<PromptFrame> {
        (!self.refer && !self.oracle).then(|| Self::with_refer(self.framework))
    }

    /// Human-readable row label used in tables.
    pub fn display_name(&self) -> &'static str {
        if self.oracle {
            return "Oracle";
        }
        match (self.framework, self.refer) {
            (Framework::Direct, false) => "Direct Prompting",
            (Framework::Direct, true) => "REFER",
            (Framework::FairPrefix, false) => "Prefix-instruct",
            (Framework::FairPrefix, true) => "Prefix-instruct-R",
            (Framework::PersonaPrefix, false) => "Prefix-role",
            (Framework::PersonaPrefix, true) => "Prefix-role-R",
            (Framework::Cot, false) => "CoT",
            (Framework::Cot, true) => "CoT-R",
            (Framework::Agent, false) => "Agent",
            (Framework::Agent, true) => "Agent-R",
        }
    }
}

impl fmt::Display for PromptFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.oracle {
            return f.write_str("oracle");
        }
        f.write_str(self.framework.cli_stem())?;
        if self.refer {
            f.write_str("-r")?;
        }
        Ok(())
    }
}

impl FromStr for PromptFrame {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "oracle" {
            return Ok(Self::oracle());
        }
        let (stem, refer) = match s.strip_suffix("-r") {
            Some(stem) => (stem, true),
            None => (s, false),
        };
        Framework::ALL
            .into_iter()
            .find(|f| f.cli_stem() == stem)
            .map(|framework| Self {
                framework,
                refer,
                oracle: false,
            })
            .ok_or_else(|| PromptError::UnknownFrame(s.to_string()))
    }
}

impl TryFrom<String> for PromptFrame {
    type Error = PromptError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<PromptFrame> for String {
    fn from(f: PromptFrame) -> Self {
        f.to_string()
    }
}

/// Parses a comma-separated frame list such as `direct,direct-r,oracle`.
pub fn parse_frames(list: &str) -> Result<Vec<PromptFrame>, PromptError> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// Stage of the four-role agent pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentStage {
    Summariser,
    Frequency,
    Judge,
    Editor,
}

impl AgentStage {
    pub const ORDER: [AgentStage; 4] = [
        AgentStage::Summariser,
        AgentStage::Frequency,
        AgentStage::Judge,
        AgentStage::Editor,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AgentStage::Summariser => "summariser",
            AgentStage::Frequency => "frequency",
            AgentStage::Judge => "judge",
            AgentStage::Editor => "editor",
        }
    }
}

/// Prompt text ready for a chat-completion call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_text: Option<String>,
    pub user_text: String,
    pub frame: PromptFrame,
    pub collection_id: String,
}

fn template(raw: &'static str) -> &'static str {
    raw.strip_suffix('\n').unwrap_or(raw)
}

/// Replaces `{key}` placeholders in one pass. Unknown keys are left verbatim.
pub fn fill(template_text: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template_text.len() * 2);
    let mut rest = template_text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let key_end = after.find('}');
        let replaced = key_end.and_then(|end| {
            let key = &after[..end];
            vars.iter().find(|(k, _)| *k == key).map(|(_, v)| (end, *v))
        });
        match replaced {
            Some((end, value)) => {
                out.push_str(value);
                rest = &after[end + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn capitalise(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

pub fn join_documents(collection: &Collection) -> String {
    collection
        .documents
        .iter()
        .map(|d| d.text.as_str())
        .collect::<Vec<_>>()
        .join(DOCUMENT_SEPARATOR)
}

fn value_list(scheme: &ValueScheme) -> String {
    scheme.labels().collect::<Vec<_>>().join(", ")
}

/// The frequency-claim output format shown to agents, e.g. `{positive #number, negative #number}`.
pub fn frequency_format(scheme: &ValueScheme) -> String {
    let inner: Vec<String> = scheme.labels().map(|l| format!("{l} #number")).collect();
    format!("{{{}}}", inner.join(", "))
}

/// "6 and 2", "3, 3 and 2".
fn count_list(counts: &[usize]) -> String {
    let parts: Vec<String> = counts.iter().map(usize::to_string).collect();
    match parts.split_last() {
        Some((last, init)) if !init.is_empty() => format!("{} and {last}", init.join(", ")),
        Some((last, _)) => last.clone(),
        None => String::new(),
    }
}

struct Vars {
    topic: String,
    source: String,
    n: String,
    values: String,
    singular: String,
    plural: String,
    plural_cap: String,
    format: String,
}

impl Vars {
    fn of(collection: &Collection) -> Self {
        let noun = &collection.scheme.noun;
        Self {
            topic: collection.topic.clone(),
            source: join_documents(collection),
            n: collection.size().to_string(),
            values: value_list(&collection.scheme),
            singular: noun.singular.clone(),
            plural: noun.plural.clone(),
            plural_cap: capitalise(&noun.plural),
            format: frequency_format(&collection.scheme),
        }
    }

    fn apply(&self, template_text: &str, extra: &[(&str, &str)]) -> String {
        let mut vars = vec![
            ("topic", self.topic.as_str()),
            ("source", self.source.as_str()),
            ("n", self.n.as_str()),
            ("values", self.values.as_str()),
            ("singular", self.singular.as_str()),
            ("plural", self.plural.as_str()),
            ("Plural", self.plural_cap.as_str()),
            ("format", self.format.as_str()),
        ];
        vars.extend_from_slice(extra);
        fill(template_text, &vars)
    }
}

fn direct_prompt(vars: &Vars) -> String {
    vars.apply(template(templates::DIRECT), &[])
}

pub fn render_refer_clause(collection: &Collection) -> String {
    Vars::of(collection).apply(template(templates::REFER_CLAUSE), &[])
}

fn oracle_clause(collection: &Collection, vars: &Vars) -> String {
    let counts = count_list(&collection.proportion.aligned(&collection.scheme));
    vars.apply(
        template(templates::ORACLE_CLAUSE),
        &[("counts", counts.as_str())],
    )
}

fn compose(parts: &[&str]) -> String {
    parts.join(" ")
}

fn check_non_empty(collection: &Collection) -> Result<(), PromptError> {
    if collection.documents.is_empty() {
        return Err(PromptError::EmptyCollection(collection.id.clone()));
    }
    Ok(())
}

/// Renders the single prompt for `frame`.
///
/// Composition is prefix, REFER clause, then the direct prompt, separated by
/// single spaces. For the agent framework with REFER this is the first
/// (summariser) stage prompt; see [`render_agent_stage`] for later stages.
pub fn render(frame: PromptFrame, collection: &Collection) -> Result<RenderedPrompt, PromptError> {
    frame.validate()?;
    check_non_empty(collection)?;
    if frame.oracle {
        return render_oracle(collection);
    }
    if frame.is_agent() && frame.refer {
        return render_agent_stage(collection, &AgentContext::default(), AgentStage::Summariser);
    }
    let vars = Vars::of(collection);
    let direct = direct_prompt(&vars);
    let refer = frame
        .refer
        .then(|| vars.apply(template(templates::REFER_CLAUSE), &[]));
    let mut parts: Vec<&str> = Vec::new();
    if let Some(prefix) = frame.framework.prefix() {
        parts.push(template(prefix));
    }
    if let Some(clause) = refer.as_deref() {
        parts.push(clause);
    }
    parts.push(&direct);
    Ok(RenderedPrompt {
        system_text: None,
        user_text: compose(&parts),
        frame,
        collection_id: collection.id.clone(),
    })
}

/// Oracle prompt: the ground-truth counts followed by the direct prompt.
pub fn render_oracle(collection: &Collection) -> Result<RenderedPrompt, PromptError> {
    check_non_empty(collection)?;
    let vars = Vars::of(collection);
    let clause = oracle_clause(collection, &vars);
    Ok(RenderedPrompt {
        system_text: None,
        user_text: compose(&[&clause, &direct_prompt(&vars)]),
        frame: PromptFrame::oracle(),
        collection_id: collection.id.clone(),
    })
}

/// Proposition-splitting prompt for a generated summary.
pub fn render_decomposition(summary_text: &str) -> Result<RenderedPrompt, PromptError> {
    if summary_text.trim().is_empty() {
        return Err(PromptError::EmptySummary);
    }
    Ok(RenderedPrompt {
        system_text: None,
        user_text: fill(
            template(templates::DECOMPOSITION),
            &[("summary", summary_text)],
        ),
        frame: PromptFrame::base(Framework::Direct),
        collection_id: String::new(),
    })
}

/// Outputs of earlier agent stages that later stage prompts embed verbatim.
#[derive(Debug, Clone, Default)]
pub struct AgentContext {
    pub summary: String,
    pub frequency: String,
    pub feedback: String,
}

pub fn render_agent_stage(
    collection: &Collection,
    ctx: &AgentContext,
    stage: AgentStage,
) -> Result<RenderedPrompt, PromptError> {
    check_non_empty(collection)?;
    let vars = Vars::of(collection);
    let extra = [
        ("summary", ctx.summary.as_str()),
        ("frequency", ctx.frequency.as_str()),
        ("feedback", ctx.feedback.as_str()),
    ];
    let raw = match stage {
        AgentStage::Summariser => templates::AGENT_REFER_SUMMARISER,
        AgentStage::Frequency => templates::AGENT_FREQUENCY,
        AgentStage::Judge => templates::AGENT_JUDGE,
        AgentStage::Editor => templates::AGENT_EDITOR,
    };
    Ok(RenderedPrompt {
        system_text: None,
        user_text: vars.apply(template(raw), &extra),
        frame: PromptFrame::with_refer(Framework::Agent),
        collection_id: collection.id.clone(),
    })
}

/// Single-label classification prompt used by the LLM-judge valuation backend.
pub fn render_classification(statement: &str, scheme: &ValueScheme) -> String {
    let categories: Vec<String> = scheme
        .values
        .iter()
        .map(|v| format!("- {}: {}", v.label, v.descriptor))
        .collect();
    fill(
        template(templates::CLASSIFY),
        &[
            ("categories", categories.join("\n").as_str()),
            ("statement", statement),
        ],
    )
}

/// Template placeholder names still present in `text`, e.g. `{topic}`.
pub fn placeholder_residue(text: &str) -> Vec<String> {
    const KEYS: [&str; 14] = [
        "topic",
        "source",
        "n",
        "values",
        "singular",
        "plural",
        "Plural",
        "format",
        "counts",
        "summary",
        "frequency",
        "feedback",
        "categories",
        "statement",
    ];
    KEYS.iter()
        .map(|k| format!("{{{k}}}"))
        .filter(|p| text.contains(p.as_str()))
        .collect()
}
