use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use refer_core::cli::{self, CliError, Overrides, RunDir};
use refer_core::promptkit;

/// Fairness evaluation of opinion summaries under REFER prompting.
#[derive(Parser)]
#[command(name = "refer", version)]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// Run directory holding every artifact of one experiment.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,

    /// Experiment configuration (TOML); read by `sample`, which stores a copy in the run directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Comma-separated frames, e.g. `direct,direct-r,oracle`.
    #[arg(long, global = true)]
    frames: Option<String>,

    /// Comma-separated model ids.
    #[arg(long, global = true)]
    model: Option<String>,

    /// Maximum concurrent requests.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Offline provider: faithful, majority-only, frequency-aware or script.
    #[arg(long, global = true)]
    mock: Option<String>,

    /// Classification backend: lexicon, llm-judge or remote.
    #[arg(long, global = true)]
    backend: Option<String>,

    /// Sampling seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw fixed-proportion collections from the corpus.
    Sample,
    /// Generate summaries for every (model, frame, collection) not yet recorded.
    Run,
    /// Classify propositions and score each trial.
    Evaluate,
    /// Mann-Whitney tests of each base frame against its REFER counterpart.
    Compare,
    /// Write the delta table, CSVs and the run manifest.
    Report,
}

fn overrides(args: &Args) -> Result<Overrides, CliError> {
    let frames = args
        .frames
        .as_deref()
        .map(promptkit::parse_frames)
        .transpose()
        .map_err(|e| CliError::Config {
            field: "--frames".into(),
            reason: e.to_string(),
        })?;
    Ok(Overrides {
        frames,
        models: args
            .model
            .as_deref()
            .map(|m| m.split(',').map(|s| s.trim().to_string()).collect()),
        jobs: args.jobs,
        mock: args.mock.clone(),
        backend: args.backend.clone(),
        seed: args.seed,
    })
}

fn execute(args: &Args) -> Result<(), CliError> {
    let ov = overrides(args)?;
    let run = RunDir::new(&args.run_dir);
    match args.command {
        Command::Sample => {
            let config = args.config.as_deref().ok_or_else(|| CliError::Config {
                field: "--config".into(),
                reason: "`sample` needs a configuration file".into(),
            })?;
            for r in cli::cmd_sample(config, &run, &ov)? {
                println!(
                    "{}: {} collections, counts {:?}",
                    r.regime, r.collections, r.counts
                );
            }
        }
        Command::Run => {
            let stats = cli::cmd_run(&run, &ov, None)?;
            println!(
                "{} trials run, {} skipped, cache hit ratio {:.2}",
                stats.executed,
                stats.skipped,
                stats.stats.cache_hit_ratio()
            );
        }
        Command::Evaluate => {
            let scores = cli::cmd_evaluate(&run, &ov, None)?;
            println!("{} trials scored", scores.len());
        }
        Command::Compare => {
            let rows = cli::cmd_compare(&run, &ov)?;
            let wins = rows.iter().filter(|r| r.comparison.significant).count();
            println!("{} comparisons, {wins} significant", rows.len());
        }
        Command::Report => {
            cli::cmd_report(&run, &ov)?;
            print!("{}", run.read_to_string(cli::rundir::REPORT)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let err =
                anyhow::Error::new(e).context(format!("run directory {}", args.run_dir.display()));
            eprintln!("error: {err:#}");
            ExitCode::from(code as u8)
        }
    }
}
