//! Fixtures shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use refer_core::cli::{self, Overrides, RunDir};
use refer_core::corpus::{word_count, Collection, Document, ProportionSpec, Regime, ValueScheme};
use refer_core::promptkit::{
    self, render_agent_stage, AgentContext, AgentStage, Framework, PromptFrame,
};
use tempfile::TempDir;

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn reviews_fixture() -> PathBuf {
    manifest_dir().join("tests/fixtures/reviews.jsonl")
}

pub fn golden_dir() -> PathBuf {
    manifest_dir().join("tests/golden")
}

/// Reads a golden file, dropping the single trailing newline editors add.
pub fn read_golden(name: &str) -> String {
    let path = golden_dir().join(format!("{name}.txt"));
    let text = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text.strip_suffix('\n').unwrap_or(&text).to_string()
}

fn doc(id: usize, text: &str, label: &str) -> Document {
    Document {
        id: format!("k{id}"),
        text: text.into(),
        value_label: label.into(),
        topic: "electric kettles".into(),
        word_count: word_count(text),
    }
}

/// Eight kettle reviews, six positive and two negative, in a fixed order.
pub fn golden_collection() -> Collection {
    let rows = [
        ("Boils a full jug in two minutes", "positive"),
        ("The lid feels sturdy and seals well", "positive"),
        ("Stopped heating after a week", "negative"),
        ("Looks great on the counter", "positive"),
        ("Quiet and quick every morning", "positive"),
        ("The handle gets hot and the base leaks", "negative"),
        ("Good value for the price", "positive"),
        ("Easy to clean and descale", "positive"),
    ];
    let documents = rows
        .iter()
        .enumerate()
        .map(|(i, (t, l))| doc(i + 1, t, l))
        .collect();
    let mut counts = IndexMap::new();
    counts.insert("positive".to_string(), 6);
    counts.insert("negative".to_string(), 2);
    Collection {
        id: "golden-0001".into(),
        scheme: ValueScheme::sentiment(),
        topic: "electric kettles".into(),
        documents,
        proportion: ProportionSpec { counts },
        regime_tag: Regime::SkewV1,
    }
}

pub const GOLDEN_SUMMARY: &str = "Most reviews praise the kettle.";
pub const GOLDEN_FREQUENCY: &str = "{positive #6, negative #2}";
pub const GOLDEN_FEEDBACK: &str = "The summary omits the two negative reviews.";
pub const GOLDEN_DECOMPOSE_INPUT: &str = "The kettle boils quickly. Two reviewers report faults.";

/// `(golden file stem, rendered text)` for the twelve prompts every run relies on:
/// the ten framework frames, the oracle and the decomposition prompt.
pub fn golden_frame_cases() -> Vec<(String, String)> {
    let c = golden_collection();
    let mut out: Vec<(String, String)> = PromptFrame::all()
        .into_iter()
        .map(|f| {
            let text = promptkit::render(f, &c).expect("renders").user_text;
            (f.to_string(), text)
        })
        .collect();
    let decomposition = promptkit::render_decomposition(GOLDEN_DECOMPOSE_INPUT)
        .expect("renders")
        .user_text;
    out.push(("decomposition".into(), decomposition));
    out
}

/// Later agent stages, rendered with fixed upstream outputs.
pub fn golden_agent_stage_cases() -> Vec<(String, String)> {
    let c = golden_collection();
    let ctx = AgentContext {
        summary: GOLDEN_SUMMARY.into(),
        frequency: GOLDEN_FREQUENCY.into(),
        feedback: GOLDEN_FEEDBACK.into(),
    };
    [AgentStage::Frequency, AgentStage::Judge, AgentStage::Editor]
        .into_iter()
        .map(|s| {
            let text = render_agent_stage(&c, &ctx, s).expect("renders").user_text;
            (format!("agent-{}", s.as_str()), text)
        })
        .collect()
}

pub fn agent_r() -> PromptFrame {
    PromptFrame::with_refer(Framework::Agent)
}

/// Line-delimited corpus with `per_label` documents per label and topic.
/// Every text has forty words so it passes the review length filter.
pub fn synthetic_corpus(scheme: &ValueScheme, topics: &[&str], per_label: usize) -> String {
    let mut out = String::new();
    let mut n = 0;
    for topic in topics {
        for label in scheme.labels() {
            for i in 0..per_label {
                n += 1;
                let head = format!("{label} view {i} on {topic}");
                let pad = 40 - word_count(&head);
                let text = format!("{head}{}", " filler".repeat(pad));
                let rec = serde_json::json!({
                    "id": format!("s{n:05}"),
                    "text": text,
                    "value_label": label,
                    "topic": topic,
                });
                out.push_str(&rec.to_string());
                out.push('\n');
            }
        }
    }
    out
}

/// Writes `body` as `config.toml` in `dir`, returning its path.
pub fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("experiment.toml");
    fs::write(&path, body).unwrap();
    path
}

/// Config over the bundled reviews fixture with the given mock and frames.
pub fn mock_config(mock: &str, n_collections: usize, extra_generation: &str) -> String {
    format!(
        r#"[corpus]
path = "{}"

[sampling]
size = 8
n_collections = {n_collections}
seed = 7

[generation]
mock = "{mock}"
jobs = 4
{extra_generation}

[evaluation]
backend = "lexicon"
"#,
        reviews_fixture().display()
    )
}

/// A temp directory holding a config and a sampled run directory.
pub struct Workspace {
    pub tmp: TempDir,
    pub run: RunDir,
    pub config: PathBuf,
}

impl Workspace {
    pub fn sampled(config_body: &str) -> Self {
        let tmp = TempDir::new().unwrap();
        let config = write_config(tmp.path(), config_body);
        let run = RunDir::new(tmp.path().join("run"));
        cli::cmd_sample(&config, &run, &Overrides::default()).expect("sample");
        Self { tmp, run, config }
    }

    /// run, evaluate, compare and report with the configured provider.
    pub fn pipeline(&self) {
        let ov = Overrides::default();
        cli::cmd_run(&self.run, &ov, None).expect("run");
        cli::cmd_evaluate(&self.run, &ov, None).expect("evaluate");
        cli::cmd_compare(&self.run, &ov).expect("compare");
        cli::cmd_report(&self.run, &ov).expect("report");
    }

    pub fn read(&self, name: &str) -> String {
        self.run.read_to_string(name).unwrap()
    }
}
