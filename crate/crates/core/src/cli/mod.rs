//! Subcommands over a run directory: sample, run, evaluate, compare, report.
//!
//! Every command reads what earlier commands wrote and may be repeated; `run`
//! skips trials already recorded and `evaluate`/`compare`/`report` rewrite
//! their outputs from scratch.

pub mod config;
pub mod rundir;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::Config;
pub use rundir::RunDir;

use crate::corpus::{self, Collection, CorpusError, Regime};
use crate::fairmetrics::{self, FairnessScores, Metric, MetricCell, MetricError};
use crate::llmgateway::mock::{MockSummariser, ScriptedProvider};
use crate::llmgateway::openai::OpenAiProvider;
use crate::llmgateway::{
    fan_out, CacheStore, Gateway, GatewayError, Provider, RetryPolicy, StatsSnapshot,
};
use crate::pipeline::{Pipeline, StageLog, TrialKey, TrialRecord};
use crate::promptkit::PromptFrame;
use crate::reporter::{self, ComparisonRow, RegimeCells, RunManifest, TableCells};
use crate::stattools;
use crate::valuation::{
    self, Classifier, Lexicon, LlmJudgeClassifier, RemoteScorer, ValuationError,
};

/// Regime label for cells and comparisons pooled over all regimes.
pub const ALL_REGIMES: &str = "all";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration at `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("{failed} of {total} trials failed; see run_stats.json")]
    TrialFailures { failed: usize, total: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Valuation(#[from] ValuationError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl CliError {
    /// 2 for configuration and missing inputs, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::MissingInput(_) => 2,
            _ => 1,
        }
    }
}

/// Command-line values that take precedence over the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub frames: Option<Vec<PromptFrame>>,
    pub models: Option<Vec<String>>,
    pub jobs: Option<usize>,
    pub mock: Option<String>,
    pub backend: Option<String>,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, config: &mut Config) {
        if let Some(frames) = &self.frames {
            config.generation.frames = frames.iter().map(|f| f.to_string()).collect();
        }
        if let Some(models) = &self.models {
            config.generation.models = models.clone();
        }
        if let Some(jobs) = self.jobs {
            config.generation.jobs = jobs;
        }
        if let Some(mock) = &self.mock {
            config.generation.mock = Some(mock.clone());
        }
        if let Some(backend) = &self.backend {
            config.evaluation.backend = backend.clone();
        }
        if let Some(seed) = self.seed {
            config.sampling.seed = seed;
        }
    }
}

fn load_run_config(run: &RunDir, overrides: &Overrides) -> Result<(Config, String), CliError> {
    let text = run.read_to_string(rundir::CONFIG).map_err(|_| {
        CliError::MissingInput(format!(
            "{} has no {}; run `sample` first",
            run.root().display(),
            rundir::CONFIG
        ))
    })?;
    let mut config = Config::from_toml(&text)?;
    overrides.apply(&mut config);
    config.validate()?;
    Ok((config, text))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSample {
    pub regime: Regime,
    pub collections: usize,
    pub counts: Vec<usize>,
}

/// Samples collections for every configured regime and stores them with a
/// resolved copy of the configuration.
pub fn cmd_sample(
    config_path: &Path,
    run: &RunDir,
    overrides: &Overrides,
) -> Result<Vec<RegimeSample>, CliError> {
    let mut config = Config::load(config_path)?;
    overrides.apply(&mut config);
    config.validate()?;
    if !config.corpus.path.is_file() {
        return Err(CliError::MissingInput(format!(
            "corpus file {} does not exist",
            config.corpus.path.display()
        )));
    }
    let scheme = config.scheme()?;
    let docs = corpus::ingest(&config.corpus.path, &scheme, config.length_filter())?;
    log::info!("ingested {} documents", docs.len());

    let mut all = Vec::new();
    let mut summary = Vec::new();
    for (i, &regime) in config.sampling.regimes.iter().enumerate() {
        let spec = config.proportion(&scheme, regime)?;
        let seed = config.sampling.seed.wrapping_add(i as u64);
        let collections = corpus::sample_collections(
            &docs,
            &scheme,
            &spec,
            regime,
            config.sampling.n_collections,
            seed,
        )?;
        let counts = spec.aligned(&scheme);
        log::info!(
            "{regime}: {} collections with counts {counts:?}",
            collections.len()
        );
        summary.push(RegimeSample {
            regime,
            collections: collections.len(),
            counts,
        });
        all.extend(collections);
    }

    run.create()?;
    run.write(rundir::CONFIG, &config.to_toml())?;
    run.write_jsonl(rundir::COLLECTIONS, &all)?;
    Ok(summary)
}

fn read_collections(run: &RunDir) -> Result<Vec<Collection>, CliError> {
    let collections: Vec<Collection> = run.read_jsonl(rundir::COLLECTIONS)?;
    if collections.is_empty() {
        return Err(CliError::MissingInput(format!(
            "{} is empty",
            run.path(rundir::COLLECTIONS).display()
        )));
    }
    Ok(collections)
}

fn build_provider(
    config: &Config,
    collections: &[Collection],
) -> Result<Arc<dyn Provider>, CliError> {
    if let Some(behaviour) = config.mock_behaviour()? {
        return Ok(Arc::new(MockSummariser::new(
            behaviour,
            collections.to_vec(),
        )));
    }
    if config.generation.mock.as_deref() == Some("script") {
        let path = config.generation.mock_script.as_deref().expect("validated");
        let script = ScriptedProvider::from_file(path).map_err(|reason| CliError::Config {
            field: "generation.mock_script".into(),
            reason,
        })?;
        return Ok(Arc::new(script));
    }
    let env = &config.provider.api_key_env;
    if std::env::var(env).is_err() {
        return Err(CliError::Config {
            field: "provider.api_key_env".into(),
            reason: format!("environment variable {env} is not set"),
        });
    }
    Ok(Arc::new(OpenAiProvider::new(config.provider.clone())?))
}

fn build_gateway(
    config: &Config,
    run: &RunDir,
    provider: Arc<dyn Provider>,
) -> Result<Gateway, CliError> {
    let cache_dir = config
        .generation
        .cache_dir
        .clone()
        .unwrap_or_else(|| run.path(rundir::CACHE));
    let retry = if config.generation.mock.is_some() {
        RetryPolicy::immediate(RetryPolicy::default().backoff.len())
    } else {
        RetryPolicy::default()
    };
    Ok(Gateway::new(provider)
        .with_cache(CacheStore::open(cache_dir)?)
        .with_retry(retry)
        .with_max_in_flight(config.generation.jobs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub model_id: String,
    pub frame: PromptFrame,
    pub collection_id: String,
    pub error: String,
}

/// Outcome of the latest `run`, kept for the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub provider: String,
    pub executed: usize,
    pub skipped: usize,
    pub failed: usize,
    pub stats: StatsSnapshot,
    pub wall_time_secs: f64,
    pub failures: Vec<TrialFailure>,
}

#[derive(Debug, Clone, Serialize)]
struct AuditEntry<'a> {
    model_id: &'a str,
    frame: PromptFrame,
    collection_id: &'a str,
    #[serde(flatten)]
    log: &'a StageLog,
}

/// Runs every (model, frame, collection) trial not yet in `trials.jsonl`.
///
/// `provider` replaces the configured provider when given.
pub fn cmd_run(
    run: &RunDir,
    overrides: &Overrides,
    provider: Option<Arc<dyn Provider>>,
) -> Result<RunStats, CliError> {
    let (config, _) = load_run_config(run, overrides)?;
    let collections = read_collections(run)?;
    let provider = match provider {
        Some(p) => p,
        None => build_provider(&config, &collections)?,
    };
    let gateway = build_gateway(&config, run, provider)?;
    let pipeline =
        Pipeline::new(&gateway).with_decomposer_model(config.generation.decomposer_model.clone());

    let done: HashSet<TrialKey> = run
        .read_jsonl_or_empty::<TrialRecord>(rundir::TRIALS)?
        .iter()
        .map(TrialRecord::key)
        .collect();
    let frames = config.generation.parsed_frames()?;
    let mut jobs = Vec::new();
    let mut skipped = 0;
    for model in config.generation.model_ids() {
        for &frame in &frames {
            for c in &collections {
                let key = TrialKey {
                    model_id: model.clone(),
                    frame,
                    collection_id: c.id.clone(),
                };
                if done.contains(&key) {
                    skipped += 1;
                } else {
                    jobs.push((model.clone(), frame, c));
                }
            }
        }
    }
    log::info!("{} trials to run, {skipped} already recorded", jobs.len());

    let start = Instant::now();
    let outcomes = fan_out(&jobs, config.generation.jobs, |(model, frame, c)| {
        pipeline.run_trial(c, *frame, &config.generation.params(model))
    });
    let wall = start.elapsed();

    let mut records = Vec::new();
    let mut audit = Vec::new();
    let mut failures = Vec::new();
    for ((model, frame, c), outcome) in jobs.iter().zip(&outcomes) {
        match outcome {
            Ok(trial) => {
                records.push(&trial.record);
                audit.extend(trial.audit.iter().map(|log| AuditEntry {
                    model_id: model,
                    frame: *frame,
                    collection_id: &c.id,
                    log,
                }));
            }
            Err(e) => {
                log::error!("{model} {frame} {}: {e}", c.id);
                failures.push(TrialFailure {
                    model_id: model.clone(),
                    frame: *frame,
                    collection_id: c.id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    run.append_jsonl(rundir::TRIALS, &records)?;
    run.append_jsonl(rundir::AUDIT, &audit)?;

    let stats = RunStats {
        provider: gateway.provider_name().to_string(),
        executed: records.len(),
        skipped,
        failed: failures.len(),
        stats: gateway.stats(),
        wall_time_secs: wall.as_secs_f64(),
        failures,
    };
    run.write(
        rundir::RUN_STATS,
        &(serde_json::to_string_pretty(&stats).expect("stats serialise") + "\n"),
    )?;
    if stats.failed > 0 {
        return Err(CliError::TrialFailures {
            failed: stats.failed,
            total: jobs.len(),
        });
    }
    Ok(stats)
}

/// One evaluated trial as stored in `scores.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub model_id: String,
    pub regime: Regime,
    pub backend: String,
    pub n_propositions: usize,
    pub zero_evidence: usize,
    pub source: Vec<f64>,
    pub summary: Vec<f64>,
    #[serde(flatten)]
    pub scores: FairnessScores,
}

fn read_trials(run: &RunDir) -> Result<Vec<TrialRecord>, CliError> {
    let mut trials: Vec<TrialRecord> = run.read_jsonl(rundir::TRIALS)?;
    if trials.is_empty() {
        return Err(CliError::MissingInput(
            "no trials recorded; run `run` first".into(),
        ));
    }
    trials.sort_by_key(TrialRecord::key);
    Ok(trials)
}

/// Classifies every trial's propositions and scores it against its collection.
///
/// `provider` replaces the configured provider for the `llm-judge` backend.
pub fn cmd_evaluate(
    run: &RunDir,
    overrides: &Overrides,
    provider: Option<Arc<dyn Provider>>,
) -> Result<Vec<ScoreRecord>, CliError> {
    let (config, _) = load_run_config(run, overrides)?;
    let collections = read_collections(run)?;
    let by_id: HashMap<&str, &Collection> =
        collections.iter().map(|c| (c.id.as_str(), c)).collect();
    let trials = read_trials(run)?;
    let scheme = config.scheme()?;
    let eval = &config.evaluation;

    let judge_gateway = if eval.backend == "llm-judge" {
        let provider = match provider {
            Some(p) => p,
            None => build_provider(&config, &collections)?,
        };
        Some(build_gateway(&config, run, provider)?)
    } else {
        None
    };
    let classifier: Box<dyn Classifier + '_> = match eval.backend.as_str() {
        "lexicon" => Box::new(match &eval.lexicon_dir {
            Some(dir) => Lexicon::from_dir(dir, &scheme)?,
            None => Lexicon::builtin(&scheme),
        }),
        "llm-judge" => {
            let model = eval
                .judge_model
                .clone()
                .unwrap_or_else(|| config.generation.model_ids()[0].clone());
            Box::new(LlmJudgeClassifier::new(
                judge_gateway.as_ref().expect("built above"),
                config.generation.params(&model),
            ))
        }
        _ => {
            let url = eval.scorer_url.as_deref().expect("validated");
            let scorer = RemoteScorer::new(url, Duration::from_secs(120))?;
            scorer.health()?;
            Box::new(scorer)
        }
    };

    let mut out = Vec::with_capacity(trials.len());
    for t in &trials {
        let collection = by_id.get(t.collection_id.as_str()).ok_or_else(|| {
            CliError::MissingInput(format!(
                "trial refers to unknown collection {}",
                t.collection_id
            ))
        })?;
        let classified = classifier.classify(&t.propositions, &scheme)?;
        let summary = valuation::summary_distribution(&classified, &scheme, eval.mode);
        let source = valuation::source_distribution(collection);
        let empty = t.empty_summary || summary.empty_summary;
        let scores = FairnessScores::compute(
            &t.collection_id,
            t.frame,
            &source,
            &summary.distribution,
            empty,
            eval.threshold,
        )?;
        out.push(ScoreRecord {
            model_id: t.model_id.clone(),
            regime: t.regime,
            backend: classifier.name().to_string(),
            n_propositions: classified.len(),
            zero_evidence: summary.zero_evidence,
            source: source.weights,
            summary: summary.distribution.weights,
            scores,
        });
    }
    run.write_jsonl(rundir::SCORES, &out)?;
    log::info!(
        "scored {} trials with the {} backend",
        out.len(),
        classifier.name()
    );
    Ok(out)
}

fn read_scores(run: &RunDir) -> Result<Vec<ScoreRecord>, CliError> {
    let scores: Vec<ScoreRecord> = run.read_jsonl(rundir::SCORES)?;
    if scores.is_empty() {
        return Err(CliError::MissingInput(
            "scores.jsonl is empty; run `evaluate` first".into(),
        ));
    }
    Ok(scores)
}

type Grouped<'a> = BTreeMap<(String, String, PromptFrame), Vec<&'a FairnessScores>>;

/// Groups per (model, regime, frame), plus a pooled `all` regime.
fn group_scores(scores: &[ScoreRecord]) -> Grouped<'_> {
    let mut groups: Grouped = BTreeMap::new();
    for s in scores {
        for regime in [s.regime.as_str(), ALL_REGIMES] {
            groups
                .entry((s.model_id.clone(), regime.to_string(), s.scores.frame))
                .or_default()
                .push(&s.scores);
        }
    }
    groups
}

/// Mann–Whitney comparisons of each base frame with its REFER counterpart,
/// per model and regime (including the pooled regime).
pub fn compute_comparisons(scores: &[ScoreRecord], alpha: f64) -> Vec<ComparisonRow> {
    let groups = group_scores(scores);
    let mut rows = Vec::new();
    for ((model, regime, frame), base) in &groups {
        let Some(refer_frame) = frame.refer_counterpart() else {
            continue;
        };
        let Some(refer) = groups.get(&(model.clone(), regime.clone(), refer_frame)) else {
            continue;
        };
        for metric in Metric::PER_TRIAL {
            let b: Vec<f64> = base.iter().map(|t| t.value(metric)).collect();
            let r: Vec<f64> = refer.iter().map(|t| t.value(metric)).collect();
            match stattools::compare_frameworks(*frame, refer_frame, metric, &b, &r, alpha) {
                Ok(comparison) => rows.push(ComparisonRow {
                    model: model.clone(),
                    regime: regime.clone(),
                    comparison,
                }),
                Err(e) => log::warn!("skipping {model} {regime} {frame} {metric}: {e}"),
            }
        }
    }
    rows
}

pub fn cmd_compare(run: &RunDir, overrides: &Overrides) -> Result<Vec<ComparisonRow>, CliError> {
    let (config, _) = load_run_config(run, overrides)?;
    let scores = read_scores(run)?;
    let rows = compute_comparisons(&scores, config.evaluation.alpha);
    run.write(
        rundir::COMPARISONS_JSON,
        &(serde_json::to_string_pretty(&rows).expect("rows serialise") + "\n"),
    )?;
    run.write(
        rundir::COMPARISONS_CSV,
        &reporter::render_comparisons_csv(&rows),
    )?;
    Ok(rows)
}

fn cells(scores: &[ScoreRecord]) -> Result<(TableCells, RegimeCells), CliError> {
    let mut table = TableCells::new();
    let mut regimes = RegimeCells::new();
    for ((model, regime, frame), trials) in group_scores(scores) {
        let cell: MetricCell = fairmetrics::aggregate(trials.into_iter().cloned().collect())?;
        if regime == ALL_REGIMES {
            table.insert((model.clone(), frame), cell.clone());
        }
        regimes.insert((model, regime, frame), cell);
    }
    Ok((table, regimes))
}

fn significance_section(rows: &[ComparisonRow], alpha: f64) -> String {
    let mut out = format!(
        "\nSignificance (Mann-Whitney U, two-sided, alpha {alpha}), pooled over regimes:\n"
    );
    let pooled: Vec<&ComparisonRow> = rows.iter().filter(|r| r.regime == ALL_REGIMES).collect();
    if pooled.is_empty() {
        out.push_str("  no base/REFER pairs with at least two trials each\n");
    }
    let model_w = pooled.iter().map(|r| r.model.len()).max().unwrap_or(0);
    let pair = |c: &stattools::PairComparison| format!("{} vs {}", c.base_frame, c.refer_frame);
    let pair_w = pooled
        .iter()
        .map(|r| pair(&r.comparison).len())
        .max()
        .unwrap_or(0);
    for r in pooled {
        let c = &r.comparison;
        let verdict = match c.direction {
            stattools::Direction::ReferBetter => "REFER better",
            stattools::Direction::BaseBetter => "base better",
            stattools::Direction::None => "n.s.",
        };
        let _ = writeln!(
            out,
            "  {:<model_w$}  {:<pair_w$}  {:<4} U={:<8} p={:.4}  {verdict}",
            r.model,
            pair(c),
            c.metric.as_str(),
            c.u_statistic,
            c.p_value,
        );
    }
    out
}

fn length_section(trials: &[TrialRecord]) -> String {
    let mut groups: BTreeMap<(&str, PromptFrame), Vec<&TrialRecord>> = BTreeMap::new();
    for t in trials {
        groups
            .entry((t.model_id.as_str(), t.frame))
            .or_default()
            .push(t);
    }
    let model_w = groups
        .keys()
        .map(|(m, _)| m.len())
        .max()
        .unwrap_or(0)
        .max(5);
    let mut out = String::from("\nSummary length (words):\n");
    let _ = writeln!(
        out,
        "  {:<model_w$}  {:<18} {:>5} {:>8} {:>8} {:>8} {:>6} {:>6}",
        "model", "frame", "n", "median", "q1", "q3", "min", "max"
    );
    for ((model, frame), ts) in groups {
        let counts: Vec<usize> = ts.iter().map(|t| t.word_count).collect();
        if let Ok(s) = stattools::length_stats_of(&counts) {
            let _ = writeln!(
                out,
                "  {model:<model_w$}  {:<18} {:>5} {:>8.1} {:>8.1} {:>8.1} {:>6} {:>6}",
                frame.to_string(),
                s.n,
                s.median,
                s.q1,
                s.q3,
                s.min,
                s.max
            );
        }
    }
    out
}

/// Writes `report.txt`, `table.csv`, `bars.csv` and `manifest.json`.
pub fn cmd_report(run: &RunDir, overrides: &Overrides) -> Result<RunManifest, CliError> {
    let (config, config_text) = load_run_config(run, overrides)?;
    let scores = read_scores(run)?;
    let comparisons: Vec<ComparisonRow> = if run.exists(rundir::COMPARISONS_JSON) {
        let text = run.read_to_string(rundir::COMPARISONS_JSON)?;
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: run.path(rundir::COMPARISONS_JSON).display().to_string(),
            line: source.line(),
            source,
        })?
    } else {
        compute_comparisons(&scores, config.evaluation.alpha)
    };
    let (table, regimes) = cells(&scores)?;
    let trials = run.read_jsonl_or_empty::<TrialRecord>(rundir::TRIALS)?;

    let mut report = reporter::render_delta_table(&table);
    report.push_str(&significance_section(&comparisons, config.evaluation.alpha));
    if !trials.is_empty() {
        report.push_str(&length_section(&trials));
    }
    run.write(rundir::REPORT, &report)?;
    run.write(rundir::TABLE, &reporter::render_table_csv(&table))?;
    run.write(
        rundir::BARS,
        &reporter::render_bar_csv(&regimes, &comparisons),
    )?;

    let run_stats: Option<RunStats> = if run.exists(rundir::RUN_STATS) {
        serde_json::from_str(&run.read_to_string(rundir::RUN_STATS)?).ok()
    } else {
        None
    };
    let models: BTreeSet<&str> = scores.iter().map(|s| s.model_id.as_str()).collect();
    let frames: BTreeSet<PromptFrame> = scores.iter().map(|s| s.scores.frame).collect();
    let stats = run_stats.as_ref().map(|r| r.stats).unwrap_or_default();
    let n_collections = run
        .read_jsonl_or_empty::<serde_json::Value>(rundir::COLLECTIONS)?
        .len();
    let manifest = RunManifest {
        config_hash: reporter::config_hash(&config_text),
        sample_seed: config.sampling.seed,
        generation_seed: config.generation.seed,
        models: models.into_iter().map(str::to_string).collect(),
        frames: frames.into_iter().collect(),
        provider: run_stats
            .as_ref()
            .map(|r| r.provider.clone())
            .unwrap_or_else(|| "unknown".into()),
        n_collections,
        n_trials: scores.len(),
        requests: stats.requests,
        cache_hits: stats.cache_hits,
        provider_calls: stats.provider_calls,
        cache_hit_ratio: stats.cache_hit_ratio(),
        error_count: stats.errors,
        wall_time_secs: run_stats.as_ref().map_or(0.0, |r| r.wall_time_secs),
        complete: run_stats.as_ref().is_none_or(|r| r.failed == 0),
    };
    run.write(rundir::MANIFEST, &reporter::render_run_manifest(&manifest))?;
    Ok(manifest)
}
