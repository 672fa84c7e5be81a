//! End-to-end run on a synthetic world: probe, partition, build the
//! awareness dataset, train the toy model, and score it on held-out
//! questions before and after training.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{build_dataset_with, DatasetOptions};
use crate::error::{Error, Result};
use crate::eval::{
    awareness_eval, build_split, AwarenessReport, BaselineContext, BaselinePrompts, SplitSpec, StanceReader,
    UnknownLexicon,
};
use crate::partition::{partition, resolve_thresholds, PartitionCounts, ThresholdSpec};
use crate::probe::{probe_dataset, CacheStore, EndpointConfig, ProbeResult, QuestionRecord};
use crate::signals::SignalKind;
use crate::synthetic::{SyntheticEndpoint, SyntheticWorld, WorldConfig};
use crate::toy_trainer::{train, FeatureExtractor, ToyModel, TrainConfig, TrainingLog};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    /// Questions used for training; the rest are held out.
    pub train_questions: usize,
    pub unk_quantile: f64,
    pub k_quantile: f64,
    pub signal: SignalKind,
    pub train: TrainConfig,
    pub init_scale: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig {
                seed: 9,
                ..WorldConfig::default()
            },
            train_questions: 300,
            unk_quantile: 0.10,
            k_quantile: 0.20,
            signal: SignalKind::MinProb,
            train: TrainConfig::default(),
            init_scale: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub partition: PartitionCounts,
    pub groups: usize,
    pub untrained: AwarenessReport,
    pub trained: AwarenessReport,
    pub log: TrainingLog,
}

fn endpoint_config() -> EndpointConfig {
    let mut cfg = EndpointConfig::new("synthetic://", "synthetic");
    cfg.retries = 0;
    cfg.failure_limit = 0.0;
    cfg
}

/// Greedy reference answers for `questions`.
pub fn reference_answers(world: &Arc<SyntheticWorld>, questions: &[QuestionRecord]) -> Result<Vec<ProbeResult>> {
    let endpoint = SyntheticEndpoint::reference(world.clone());
    let run = probe_dataset(
        &endpoint_config(),
        &endpoint,
        questions,
        &world.templates.direct,
        &CacheStore::in_memory(),
    )?;
    Ok(run.results)
}

/// Scores `model` on the awareness prompts for `questions`.
pub fn score_model(
    world: &Arc<SyntheticWorld>,
    model: &ToyModel,
    questions: &[QuestionRecord],
    greedy: &[ProbeResult],
    split: &SplitSpec,
) -> Result<AwarenessReport> {
    let endpoint = SyntheticEndpoint::with_model(world.clone(), model.clone(), "toy");
    let cfg = endpoint_config();
    let lexicon = UnknownLexicon::default();
    let reader = StanceReader::new(&world.templates, lexicon.clone());
    let prompts = BaselinePrompts::default();
    let ctx = BaselineContext {
        cfg: &cfg,
        endpoint: &endpoint,
        prompts: &prompts,
        lexicon: &lexicon,
        reader: &reader,
        demonstrations: &[],
        verb_training: None,
        seed: 0,
    };
    Ok(awareness_eval(&ctx, &world.templates, questions, greedy, split)?.report)
}

/// Everything a run produced, for callers that keep working with it.
pub struct ExperimentRun {
    pub world: Arc<SyntheticWorld>,
    pub model: ToyModel,
    pub report: ExperimentReport,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    Ok(run_experiment_full(cfg)?.report)
}

pub fn run_experiment_full(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    let world = Arc::new(SyntheticWorld::generate(cfg.world)?);
    let records = world.records();
    if cfg.train_questions == 0 || cfg.train_questions >= records.len() {
        return Err(Error::invalid("train_questions must leave questions on both sides"));
    }
    let (train_q, held_q) = records.split_at(cfg.train_questions);

    let probed = reference_answers(&world, train_q)?;
    let spec = resolve_thresholds(
        &probed,
        &ThresholdSpec::quantiles(cfg.unk_quantile, cfg.k_quantile, cfg.signal),
    )?;
    let parts = partition(&probed, &spec)?;
    let groups = build_dataset_with(
        &parts,
        &world.templates,
        DatasetOptions {
            seed: cfg.world.seed,
            balance: false,
        },
    )?;

    let untrained = ToyModel::new(world.vocabulary()?, world.feature_dim(), cfg.world.seed, cfg.init_scale)?;
    let encoded = untrained.encode_groups(world.as_ref(), &groups)?;
    let (trained, log) = train(&untrained, &encoded, &cfg.train)?;

    let greedy = reference_answers(&world, held_q)?;
    let split = build_split(&greedy, held_q, &UnknownLexicon::default())?;
    let report = ExperimentReport {
        partition: parts.counts(),
        groups: groups.len(),
        untrained: score_model(&world, &untrained, held_q, &greedy, &split)?,
        trained: score_model(&world, &trained, held_q, &greedy, &split)?,
        log,
    };
    Ok(ExperimentRun {
        world,
        model: trained,
        report,
    })
}
