//! Consistency-grouped awareness training data.
//!
//! Every selected question yields one group of three examples (prior,
//! direct, posterior) that share the question's membership. Groups are
//! exported either as-is, for trainers that apply the cross-prompt
//! consistency term, or flattened to plain prompt/target pairs.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_jsonl, sha256_hex, to_jsonl, write_json};
use crate::partition::{InputChecksum, Membership, PartitionEntry, PartitionedSet};
use crate::prompts::{AwarenessKind, PromptTemplate, TemplateSet};
use crate::signals::ConfidenceScore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub group_id: String,
    pub awareness_kind: AwarenessKind,
    pub prompt_text: String,
    pub target_text: String,
    pub membership: Membership,
    pub confidence: ConfidenceScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyGroup {
    pub group_id: String,
    pub question_id: String,
    pub question: String,
    /// Probe-time greedy prediction the targets were built from.
    pub prediction: String,
    pub membership: Membership,
    pub examples: Vec<TrainingExample>,
}

impl ConsistencyGroup {
    pub fn example(&self, kind: AwarenessKind) -> Option<&TrainingExample> {
        self.examples.iter().find(|e| e.awareness_kind == kind)
    }

    pub fn validate(&self) -> Result<()> {
        if self.examples.len() != 3 {
            return Err(Error::invalid(format!(
                "group {} has {} examples, expected 3",
                self.group_id,
                self.examples.len()
            )));
        }
        for kind in AwarenessKind::ALL {
            let n = self.examples.iter().filter(|e| e.awareness_kind == kind).count();
            if n != 1 {
                return Err(Error::invalid(format!(
                    "group {} has {n} {kind} examples",
                    self.group_id
                )));
            }
        }
        for e in &self.examples {
            if e.group_id != self.group_id || e.membership != self.membership {
                return Err(Error::invalid(format!(
                    "group {} mixes group ids or memberships",
                    self.group_id
                )));
            }
            if e.prompt_text.is_empty() || e.target_text.is_empty() {
                return Err(Error::invalid(format!(
                    "group {} has an empty prompt or target",
                    self.group_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub seed: u64,
    /// Downsample the larger of the known/unknown sets to the size of the
    /// smaller one.
    pub balance: bool,
}


fn group_for(
    templates: &TemplateSet,
    membership: Membership,
    entry: &PartitionEntry,
    confidence_kind: crate::signals::SignalKind,
) -> Result<ConsistencyGroup> {
    let group_id = format!("g-{}", entry.question_id);
    let examples = AwarenessKind::ALL
        .into_iter()
        .map(|kind| {
            let template = templates.get(kind);
            let answer = (kind == AwarenessKind::Posterior).then_some(entry.prediction.as_str());
            Ok(TrainingExample {
                group_id: group_id.clone(),
                awareness_kind: kind,
                prompt_text: template.render(&entry.question, answer)?,
                target_text: template.target_for(membership, &entry.prediction)?,
                membership,
                confidence: ConfidenceScore {
                    value: entry.confidence,
                    kind: confidence_kind,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConsistencyGroup {
        group_id,
        question_id: entry.question_id.clone(),
        question: entry.question.clone(),
        prediction: entry.prediction.clone(),
        membership,
        examples,
    })
}

pub fn build_dataset(
    parts: &PartitionedSet,
    templates: &[PromptTemplate],
    options: DatasetOptions,
) -> Result<Vec<ConsistencyGroup>> {
    let set = TemplateSet::from_templates(1, templates.iter().cloned())?;
    build_dataset_with(parts, &set, options)
}

pub fn build_dataset_with(
    parts: &PartitionedSet,
    templates: &TemplateSet,
    options: DatasetOptions,
) -> Result<Vec<ConsistencyGroup>> {
    if parts.is_empty() {
        return Err(Error::invalid("partition has no selected questions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut known: Vec<&PartitionEntry> = parts.d_k.iter().collect();
    let mut unknown: Vec<&PartitionEntry> = parts.d_unk.iter().collect();
    if options.balance {
        let n = known.len().min(unknown.len());
        if n == 0 {
            return Err(Error::invalid("cannot balance: one membership set is empty"));
        }
        fn pick<'a>(v: &[&'a PartitionEntry], n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a PartitionEntry> {
            let mut chosen: Vec<&PartitionEntry> = v.choose_multiple(rng, n).copied().collect();
            chosen.sort_by(|a, b| a.question_id.cmp(&b.question_id));
            chosen
        }
        known = pick(&known, n, &mut rng);
        unknown = pick(&unknown, n, &mut rng);
    }
    let kind = parts.thresholds.signal_kind;
    let mut seen = HashSet::new();
    let mut groups = Vec::with_capacity(known.len() + unknown.len());
    for (membership, entry) in unknown
        .iter()
        .map(|e| (Membership::Unknown, *e))
        .chain(known.iter().map(|e| (Membership::Known, *e)))
    {
        if !seen.insert(entry.question_id.as_str()) {
            return Err(Error::invalid(format!(
                "question {} appears twice in the partition",
                entry.question_id
            )));
        }
        groups.push(group_for(templates, membership, entry, kind)?);
    }
    groups.shuffle(&mut rng);
    Ok(groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportFormat {
    Internal,
    SftFlat,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "internal" => Ok(ExportFormat::Internal),
            "sft-flat" => Ok(ExportFormat::SftFlat),
            other => Err(Error::invalid(format!(
                "unknown export format `{other}`, expected internal or sft-flat"
            ))),
        }
    }
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExportFormat::Internal => "internal",
            ExportFormat::SftFlat => "sft-flat",
        })
    }
}

/// One flattened prompt/target pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub target: String,
    pub group_id: String,
    pub question_id: String,
    pub awareness_kind: AwarenessKind,
    pub membership: Membership,
    pub confidence: f64,
}

pub fn flatten(groups: &[ConsistencyGroup]) -> Vec<SftRecord> {
    groups
        .iter()
        .flat_map(|g| {
            g.examples.iter().map(move |e| SftRecord {
                prompt: e.prompt_text.clone(),
                target: e.target_text.clone(),
                group_id: g.group_id.clone(),
                question_id: g.question_id.clone(),
                awareness_kind: e.awareness_kind,
                membership: e.membership,
                confidence: e.confidence.value,
            })
        })
        .collect()
}

/// Adapter settings for external fine-tuners. Recorded for reference only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerRecommendation {
    pub summary: String,
    pub method: String,
    pub target_modules: String,
    pub r: u32,
    pub alpha: u32,
    pub dropout: f64,
    pub initial_learning_rate: f64,
    pub final_learning_rate: f64,
    pub warmup_steps: u32,
    pub train_steps: u32,
    pub loss: String,
    pub consistency_pairs: String,
    pub sequence_probability: String,
}

impl Default for TrainerRecommendation {
    fn default() -> Self {
        Self {
            summary: "LoRA on attention weights only, r=8, alpha=16, dropout=0.05".into(),
            method: "lora".into(),
            target_modules: "attention".into(),
            r: 8,
            alpha: 16,
            dropout: 0.05,
            initial_learning_rate: 1e-4,
            final_learning_rate: 3e-4,
            warmup_steps: 300,
            train_steps: 700,
            loss: "sum over the three examples of target NLL, plus sum over example pairs of squared differences of target probabilities".into(),
            consistency_pairs: "unordered (i < j)".into(),
            sequence_probability: "P(y|x) is the product of target-token probabilities".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: ExportFormat,
    pub data_file: String,
    pub data_sha256: String,
    pub groups: usize,
    pub examples: usize,
    pub known_groups: usize,
    pub unknown_groups: usize,
    pub sources: Vec<InputChecksum>,
    pub trainer: TrainerRecommendation,
}

pub fn encode(groups: &[ConsistencyGroup], format: ExportFormat) -> Result<String> {
    match format {
        ExportFormat::Internal => to_jsonl(groups),
        ExportFormat::SftFlat => to_jsonl(&flatten(groups)),
    }
}

/// Writes the data file and its manifest sidecar into `dir`.
pub fn export(
    groups: &[ConsistencyGroup],
    format: ExportFormat,
    dir: &Path,
    sources: Vec<InputChecksum>,
) -> Result<(PathBuf, PathBuf)> {
    for g in groups {
        g.validate()?;
    }
    let name = match format {
        ExportFormat::Internal => "dataset.internal.jsonl",
        ExportFormat::SftFlat => "dataset.sft.jsonl",
    };
    let data_path = dir.join(name);
    let text = encode(groups, format)?;
    std::fs::write(&data_path, &text).map_err(|e| Error::io(&data_path, e))?;
    let known = groups.iter().filter(|g| g.membership == Membership::Known).count();
    let manifest = DatasetManifest {
        format,
        data_file: name.into(),
        data_sha256: sha256_hex(text.as_bytes()),
        groups: groups.len(),
        examples: groups.iter().map(|g| g.examples.len()).sum(),
        known_groups: known,
        unknown_groups: groups.len() - known,
        sources,
        trainer: TrainerRecommendation::default(),
    };
    let manifest_path = dir.join(match format {
        ExportFormat::Internal => "dataset.internal.manifest.json",
        ExportFormat::SftFlat => "dataset.sft.manifest.json",
    });
    write_json(&manifest_path, &manifest)?;
    Ok((data_path, manifest_path))
}

pub fn load_internal(path: &Path) -> Result<Vec<ConsistencyGroup>> {
    let groups: Vec<ConsistencyGroup> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for g in &groups {
        g.validate()?;
        if !seen.insert(g.question_id.clone()) {
            return Err(Error::invalid(format!(
                "{}: question {} appears in more than one group",
                path.display(),
                g.question_id
            )));
        }
    }
    Ok(groups)
}
