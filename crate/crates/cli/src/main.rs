//! `kbound`: probe a model's confidence, split questions into known and
//! unknown sets, build awareness datasets, train the toy model and score
//! boundary expression. Every run writes a manifest next to its outputs.

mod backend;
mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kbound::dataset::ExportFormat;
use kbound::eval::EvalMode;
use kbound::signals::SignalKind;

use crate::config::{Overrides, Settings};

#[derive(Parser, Debug)]
#[command(name = "kbound", version, about = "Knowledge-boundary probing and evaluation toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalArgs {
    /// TOML settings file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// http(s):// base URL of an OpenAI-compatible server, or
    /// synthetic://?seed=S&n=N[&checkpoint=PATH].
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true, value_enum)]
    signal: Option<Signal>,
    #[arg(long, global = true)]
    unk_quantile: Option<f64>,
    #[arg(long, global = true)]
    k_quantile: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    max_parallel: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
#[allow(clippy::enum_variant_names)]
enum Signal {
    MinProb,
    FstProb,
    ProdProb,
}

impl From<Signal> for SignalKind {
    fn from(s: Signal) -> Self {
        match s {
            Signal::MinProb => SignalKind::MinProb,
            Signal::FstProb => SignalKind::FstProb,
            Signal::ProdProb => SignalKind::ProdProb,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Mode {
    Raw,
    Coke,
    Prior,
    Posterior,
    IcIdk,
    Verb,
}

impl From<Mode> for EvalMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Raw => EvalMode::Raw,
            Mode::Coke => EvalMode::Coke,
            Mode::Prior => EvalMode::Prior,
            Mode::Posterior => EvalMode::Posterior,
            Mode::IcIdk => EvalMode::IcIdk,
            Mode::Verb => EvalMode::Verb,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Format {
    Internal,
    SftFlat,
}

impl From<Format> for ExportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Internal => ExportFormat::Internal,
            Format::SftFlat => ExportFormat::SftFlat,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Greedy-decode every question and record token confidences.
    Probe {
        #[arg(long)]
        questions: PathBuf,
        /// Output file stem inside the output directory.
        #[arg(long, default_value = "probe")]
        name: String,
    },
    /// Split a probe run into known, unknown and excluded questions.
    Partition {
        #[arg(long)]
        probe: PathBuf,
        /// Absolute lower threshold; requires --delta-k.
        #[arg(long)]
        delta_unk: Option<f64>,
        #[arg(long)]
        delta_k: Option<f64>,
    },
    /// Render the three awareness prompts and targets for each selected question.
    BuildDataset {
        /// `partition.jsonl`; its manifest is read from the same directory.
        #[arg(long)]
        partition: PathBuf,
        #[arg(long, value_enum)]
        format: Option<Format>,
        #[arg(long)]
        balance: bool,
    },
    /// Train the toy model on an internal-format dataset (synthetic endpoints only).
    ToyTrain {
        #[arg(long)]
        dataset: PathBuf,
        /// Disable the consistency term.
        #[arg(long)]
        no_consistency: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score one method on a reference split.
    Eval {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        questions: PathBuf,
        /// Reference greedy answers for `questions`; fixes the split.
        #[arg(long)]
        probe: PathBuf,
        /// Labeled training questions (ic-idk demonstrations, verb threshold).
        #[arg(long)]
        train_questions: Option<PathBuf>,
        #[arg(long)]
        train_probe: Option<PathBuf>,
    },
    /// Fit a confidence threshold on labeled results, optionally applying it elsewhere.
    ThresholdSearch {
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        apply_questions: Option<PathBuf>,
        #[arg(long)]
        apply_probe: Option<PathBuf>,
    },
    /// Bin reference predictions by confidence and correctness.
    Histogram {
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Write question files for a generated synthetic world.
    Synth {
        #[arg(long, default_value_t = 200)]
        questions: usize,
        /// Questions moved to the held-out file.
        #[arg(long, default_value_t = 80)]
        held_out: usize,
    },
    /// Re-check every digest recorded in a run manifest.
    Verify {
        manifest: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Probe { .. } => "probe",
            Command::Partition { .. } => "partition",
            Command::BuildDataset { .. } => "build-dataset",
            Command::ToyTrain { .. } => "toy-train",
            Command::Eval { .. } => "eval",
            Command::ThresholdSearch { .. } => "threshold-search",
            Command::Histogram { .. } => "histogram",
            Command::Synth { .. } => "synth",
            Command::Verify { .. } => "verify",
        }
    }

    fn uses_endpoint(&self) -> bool {
        match self {
            Command::Probe { .. } | Command::ToyTrain { .. } => true,
            Command::Eval { mode, .. } => !matches!(mode, Mode::Raw),
            _ => false,
        }
    }
}

fn overrides(g: &GlobalArgs) -> Overrides {
    Overrides {
        endpoint: g.endpoint.clone(),
        model: g.model.clone(),
        signal: g.signal.map(Into::into),
        unk_quantile: g.unk_quantile,
        k_quantile: g.k_quantile,
        seed: g.seed,
        out_dir: g.out_dir.clone(),
        max_parallel: g.max_parallel,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::Verify { manifest } = &cli.command {
        return commands::verify(manifest);
    }
    let mut settings = Settings::resolve(cli.global.config.as_deref(), &overrides(&cli.global))?;
    // Subcommand flags that shadow settings.
    match &cli.command {
        Command::Partition { delta_unk, delta_k, .. } => {
            if delta_unk.is_some() || delta_k.is_some() {
                settings.partition.delta_unk = *delta_unk;
                settings.partition.delta_k = *delta_k;
            }
        }
        Command::BuildDataset { format, balance, .. } => {
            if let Some(f) = format {
                settings.dataset.format = (*f).into();
            }
            settings.dataset.balance |= balance;
        }
        Command::ToyTrain {
            no_consistency, steps, ..
        } => {
            if *no_consistency {
                settings.toy.train.loss.consistency_weight = 0.0;
            }
            if let Some(s) = steps {
                settings.toy.train.steps = *s;
            }
        }
        Command::Histogram { bins: Some(b), .. } => settings.eval.bins = *b,
        _ => {}
    }
    let problems = settings.violations(cli.command.uses_endpoint());
    if !problems.is_empty() {
        return Err(kbound::Error::Config(problems).into());
    }
    eprintln!("# kbound {} resolved settings\n{}", cli.command.name(), settings.to_toml());
    std::fs::create_dir_all(&settings.out_dir)
        .map_err(|e| anyhow::anyhow!("creating {}: {e}", settings.out_dir.display()))?;

    match cli.command {
        Command::Probe { questions, name } => commands::probe(&settings, &questions, &name),
        Command::Partition { probe, .. } => commands::partition(&settings, &probe),
        Command::BuildDataset { partition, .. } => commands::build_dataset(&settings, &partition),
        Command::ToyTrain { dataset, .. } => commands::toy_train(&settings, &dataset),
        Command::Eval {
            mode,
            questions,
            probe,
            train_questions,
            train_probe,
        } => commands::eval(
            &settings,
            mode.into(),
            &questions,
            &probe,
            train_questions.as_deref().zip(train_probe.as_deref()),
        ),
        Command::ThresholdSearch {
            questions,
            probe,
            apply_questions,
            apply_probe,
        } => commands::threshold_search(
            &settings,
            &questions,
            &probe,
            apply_questions.as_deref().zip(apply_probe.as_deref()),
        ),
        Command::Histogram { questions, probe, .. } => commands::histogram(&settings, &questions, &probe),
        Command::Synth { questions, held_out } => commands::synth(&settings, questions, held_out),
        Command::Verify { .. } => unreachable!("handled before settings are resolved"),
    }
}

/// Failure report on stderr: one JSON object, then a nonzero exit.
fn report_error(err: &anyhow::Error) -> ExitCode {
    let (kind, violations, code) = match err.downcast_ref::<kbound::Error>() {
        Some(kbound::Error::Config(v)) => ("config", v.clone(), 2),
        Some(kbound::Error::InvalidInput(_)) => ("invalid-input", vec![], 1),
        Some(kbound::Error::DegenerateDistribution(_)) => ("degenerate-distribution", vec![], 1),
        Some(kbound::Error::Probe { .. } | kbound::Error::ProbeAggregate { .. }) => ("probe", vec![], 1),
        Some(kbound::Error::Capability(_)) => ("capability", vec![], 1),
        Some(kbound::Error::UndefinedMetric(_)) => ("undefined-metric", vec![], 1),
        Some(kbound::Error::TrainingFailure { .. }) => ("training-failure", vec![], 1),
        Some(kbound::Error::Io { .. } | kbound::Error::Json { .. }) => ("io", vec![], 1),
        None => ("error", vec![], 1),
    };
    let body = serde_json::json!({
        "error": {
            "kind": kind,
            "message": format!("{err:#}"),
            "violations": violations,
        }
    });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e),
    }
}
