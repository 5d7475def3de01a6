mod common;

use std::process::Command;
use std::sync::Arc;

use common::*;
use refer_core::cli::{self, rundir, CliError, Overrides, RunDir, ScoreRecord};
use refer_core::corpus::Collection;
use refer_core::llmgateway::mock::{MockBehaviour, MockSummariser};
use refer_core::llmgateway::{GatewayError, GenerationParams, Provider, ProviderReply};
use refer_core::pipeline::TrialRecord;
use refer_core::promptkit::RenderedPrompt;

const FEW_FRAMES: &str = r#"frames = ["direct", "cot", "cot-r", "oracle"]"#;

fn collections(run: &RunDir) -> Vec<Collection> {
    run.read_jsonl(rundir::COLLECTIONS).unwrap()
}

#[test]
fn sampling_is_byte_deterministic() {
    let body = mock_config("faithful", 20, "");
    let a = Workspace::sampled(&body);
    let b = Workspace::sampled(&body);
    assert_eq!(a.read(rundir::COLLECTIONS), b.read(rundir::COLLECTIONS));
    assert_eq!(a.read(rundir::CONFIG), b.read(rundir::CONFIG));
    assert_eq!(collections(&a.run).len(), 60);

    let reseeded = Workspace::sampled(&body.replace("seed = 7", "seed = 8"));
    assert_ne!(
        a.read(rundir::COLLECTIONS),
        reseeded.read(rundir::COLLECTIONS)
    );
}

#[test]
fn missing_corpus_is_a_missing_input() {
    let tmp = tempfile::TempDir::new().unwrap();
    let body = mock_config("faithful", 5, "").replace(
        &reviews_fixture().display().to_string(),
        "/nonexistent/reviews.jsonl",
    );
    let config = write_config(tmp.path(), &body);
    let err = cli::cmd_sample(
        &config,
        &RunDir::new(tmp.path().join("run")),
        &Overrides::default(),
    )
    .unwrap_err();
    assert!(matches!(err, CliError::MissingInput(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn invalid_config_names_the_field() {
    let tmp = tempfile::TempDir::new().unwrap();
    let body = mock_config("faithful", 5, "").replace("size = 8", "size = 1");
    let config = write_config(tmp.path(), &body);
    let err = cli::cmd_sample(
        &config,
        &RunDir::new(tmp.path().join("run")),
        &Overrides::default(),
    )
    .unwrap_err();
    match err {
        CliError::Config { ref field, .. } => assert_eq!(field, "sampling.size"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn rerun_skips_recorded_trials() {
    let ws = Workspace::sampled(&mock_config("faithful", 3, FEW_FRAMES));
    let ov = Overrides::default();
    let first = cli::cmd_run(&ws.run, &ov, None).unwrap();
    assert_eq!((first.executed, first.skipped, first.failed), (36, 0, 0));
    let second = cli::cmd_run(&ws.run, &ov, None).unwrap();
    assert_eq!((second.executed, second.skipped), (0, 36));
    let trials: Vec<TrialRecord> = ws.run.read_jsonl(rundir::TRIALS).unwrap();
    assert_eq!(trials.len(), 36);
}

/// Faithful mock that fails every chain-of-thought summary request.
struct FailingCot(MockSummariser);

impl Provider for FailingCot {
    fn name(&self) -> &str {
        "failing-cot"
    }

    fn complete(
        &self,
        prompt: &RenderedPrompt,
        params: &GenerationParams,
    ) -> Result<ProviderReply, GatewayError> {
        if prompt.user_text.starts_with("Let's think step by step.") {
            return Err(GatewayError::Provider {
                status: 400,
                body: "rejected".into(),
            });
        }
        self.0.complete(prompt, params)
    }
}

#[test]
fn failed_trials_are_reported_and_retried_on_rerun() {
    let ws = Workspace::sampled(&mock_config("faithful", 3, FEW_FRAMES));
    let ov = Overrides::default();
    let failing = FailingCot(MockSummariser::new(
        MockBehaviour::Faithful,
        collections(&ws.run),
    ));
    let err = cli::cmd_run(&ws.run, &ov, Some(Arc::new(failing))).unwrap_err();
    // cot and cot-r over 9 collections
    match err {
        CliError::TrialFailures { failed, total } => assert_eq!((failed, total), (18, 36)),
        ref other => panic!("unexpected {other}"),
    }
    assert_eq!(err.exit_code(), 1);
    let stats: serde_json::Value = serde_json::from_str(&ws.read(rundir::RUN_STATS)).unwrap();
    assert_eq!(stats["failures"].as_array().unwrap().len(), 18);

    let resumed = cli::cmd_run(&ws.run, &ov, None).unwrap();
    assert_eq!(
        (resumed.executed, resumed.skipped, resumed.failed),
        (18, 18, 0)
    );
}

#[test]
fn evaluation_is_repeatable() {
    let ws = Workspace::sampled(&mock_config("majority-only", 3, FEW_FRAMES));
    let ov = Overrides::default();
    cli::cmd_run(&ws.run, &ov, None).unwrap();
    cli::cmd_evaluate(&ws.run, &ov, None).unwrap();
    let first = ws.read(rundir::SCORES);
    cli::cmd_evaluate(&ws.run, &ov, None).unwrap();
    assert_eq!(first, ws.read(rundir::SCORES));
}

#[test]
fn report_without_scores_is_a_missing_input() {
    let ws = Workspace::sampled(&mock_config("faithful", 2, FEW_FRAMES));
    let err = cli::cmd_report(&ws.run, &Overrides::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    ws.run.write(rundir::SCORES, "").unwrap();
    let err = cli::cmd_report(&ws.run, &Overrides::default()).unwrap_err();
    assert!(matches!(err, CliError::MissingInput(_)), "{err}");
}

#[test]
fn commands_before_sample_are_missing_inputs() {
    let tmp = tempfile::TempDir::new().unwrap();
    let run = RunDir::new(tmp.path().join("nothing"));
    let err = cli::cmd_run(&run, &Overrides::default(), None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn llm_judge_backend_agrees_with_the_lexicon_on_mock_output() {
    let ws = Workspace::sampled(&mock_config("majority-only", 2, FEW_FRAMES));
    let ov = Overrides::default();
    cli::cmd_run(&ws.run, &ov, None).unwrap();
    let lexicon = cli::cmd_evaluate(&ws.run, &ov, None).unwrap();
    let judge_ov = Overrides {
        backend: Some("llm-judge".into()),
        ..Overrides::default()
    };
    let judged: Vec<ScoreRecord> = cli::cmd_evaluate(&ws.run, &judge_ov, None).unwrap();
    assert_eq!(lexicon.len(), judged.len());
    for (l, j) in lexicon.iter().zip(&judged) {
        assert_eq!(j.backend, "llm-judge");
        assert_eq!(l.summary, j.summary, "{}", l.scores.collection_id);
        assert_eq!(l.scores.uer, j.scores.uer);
    }
}

#[test]
fn manifest_hash_tracks_the_configuration() {
    let a = Workspace::sampled(&mock_config("faithful", 2, FEW_FRAMES));
    let b =
        Workspace::sampled(&mock_config("faithful", 2, FEW_FRAMES).replace("jobs = 4", "jobs = 2"));
    a.pipeline();
    b.pipeline();
    let ma = cli::cmd_report(&a.run, &Overrides::default()).unwrap();
    let mb = cli::cmd_report(&b.run, &Overrides::default()).unwrap();
    assert_ne!(ma.config_hash, mb.config_hash);
    assert_eq!(ma.config_hash.len(), 64);
    assert_eq!(ma.n_trials, 24);
    assert!(ma.complete);
    assert_eq!(a.read(rundir::REPORT), b.read(rundir::REPORT));
}

#[test]
fn binary_runs_the_full_flow_and_maps_exit_codes() {
    let tmp = tempfile::TempDir::new().unwrap();
    let config = write_config(tmp.path(), &mock_config("faithful", 2, FEW_FRAMES));
    let run_dir = tmp.path().join("run");
    let refer = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_refer"))
            .arg("--run-dir")
            .arg(&run_dir)
            .arg("--config")
            .arg(&config)
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    };
    for step in ["sample", "run", "evaluate", "compare", "report"] {
        let out = refer(&[step]);
        assert!(
            out.status.success(),
            "{step}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let report = String::from_utf8(refer(&["report"]).stdout).unwrap();
    assert!(report.starts_with("Fairness by framework"));
    assert!(report.contains("Model: mock-faithful"));

    let missing = Command::new(env!("CARGO_BIN_EXE_refer"))
        .arg("--run-dir")
        .arg(tmp.path().join("absent"))
        .arg("report")
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));

    let bad_frame = refer(&["--frames", "direct,bogus", "run"]);
    assert_eq!(bad_frame.status.code(), Some(2));
}
