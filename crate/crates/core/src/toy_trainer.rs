//! A small log-linear model over whole target phrases, trained with
//! target negative log-likelihood plus a cross-prompt consistency term.
//!
//! The score of phrase `y` for an input is `base(x, y) + θ[kind][class(y)] · φ(x)`,
//! where `base` and `φ` come from a frozen [`FeatureExtractor`] and only `θ`
//! is trained. Phrases share parameters through their [`TargetClass`], so
//! gradients are computed from per-class probability mass.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ConsistencyGroup;
use crate::error::{Error, Result};
use crate::io::{read_json, to_jsonl, write_json};
use crate::partition::Membership;
use crate::prompts::{AwarenessKind, TemplateSet, ANSWER_SLOT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetClass {
    Answer,
    Unknown,
    Yes,
    No,
    Sure,
    Unsure,
}

impl TargetClass {
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Candidate target phrases: answer phrases plus the control phrases of a
/// template set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyParts", into = "VocabularyParts")]
pub struct Vocabulary {
    phrases: Vec<String>,
    classes: Vec<TargetClass>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyParts {
    phrases: Vec<String>,
    classes: Vec<TargetClass>,
}

impl TryFrom<VocabularyParts> for Vocabulary {
    type Error = Error;

    fn try_from(p: VocabularyParts) -> Result<Self> {
        Vocabulary::from_parts(p.phrases, p.classes)
    }
}

impl From<Vocabulary> for VocabularyParts {
    fn from(v: Vocabulary) -> Self {
        Self {
            phrases: v.phrases,
            classes: v.classes,
        }
    }
}

impl Vocabulary {
    pub fn new<S: Into<String>>(answers: impl IntoIterator<Item = S>, templates: &TemplateSet) -> Result<Self> {
        let controls = [
            (&templates.direct.target_unknown_pattern, TargetClass::Unknown),
            (&templates.prior.target_known_pattern, TargetClass::Yes),
            (&templates.prior.target_unknown_pattern, TargetClass::No),
            (&templates.posterior.target_known_pattern, TargetClass::Sure),
            (&templates.posterior.target_unknown_pattern, TargetClass::Unsure),
        ];
        let mut phrases = Vec::new();
        let mut classes = Vec::new();
        for (phrase, class) in controls {
            if phrase.contains(ANSWER_SLOT) {
                return Err(Error::invalid(format!(
                    "control target {phrase:?} must be a fixed phrase"
                )));
            }
            phrases.push(phrase.clone());
            classes.push(class);
        }
        let mut seen: std::collections::HashSet<String> = phrases.iter().cloned().collect();
        for a in answers {
            let a = a.into();
            if seen.insert(a.clone()) {
                phrases.push(a);
                classes.push(TargetClass::Answer);
            }
        }
        Self::from_parts(phrases, classes)
    }

    pub fn from_parts(phrases: Vec<String>, classes: Vec<TargetClass>) -> Result<Self> {
        if phrases.len() != classes.len() {
            return Err(Error::invalid("vocabulary phrases and classes differ in length"));
        }
        let mut index = HashMap::with_capacity(phrases.len());
        for (i, p) in phrases.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::invalid("vocabulary contains an empty phrase"));
            }
            if index.insert(p.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary phrase {p:?}")));
            }
        }
        Ok(Self { phrases, classes, index })
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn phrase(&self, i: usize) -> &str {
        &self.phrases[i]
    }

    pub fn class(&self, i: usize) -> TargetClass {
        self.classes[i]
    }

    pub fn lookup(&self, phrase: &str) -> Option<usize> {
        self.index.get(phrase).copied()
    }
}

/// Frozen encoder from a prompt to features and base scores.
pub trait FeatureExtractor: Sync {
    /// Length of every feature vector.
    fn feature_dim(&self) -> usize;

    fn encode(&self, kind: AwarenessKind, prompt: &str, vocab: &Vocabulary) -> Result<Encoding>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub features: Vec<f64>,
    /// One fixed score per vocabulary phrase.
    pub base: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub kind: AwarenessKind,
    pub encoding: Encoding,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedGroup {
    pub group_id: String,
    pub membership: Membership,
    pub examples: Vec<EncodedExample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub vocab: Vocabulary,
    pub feature_dim: usize,
    pub seed: u64,
    /// Laid out as `[kind][class][feature]`.
    pub params: Vec<f64>,
}

impl ToyModel {
    /// Parameters start uniform in `[-init_scale, init_scale]`.
    pub fn new(vocab: Vocabulary, feature_dim: usize, seed: u64, init_scale: f64) -> Result<Self> {
        if feature_dim == 0 || vocab.is_empty() {
            return Err(Error::invalid("toy model needs features and a vocabulary"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 * TargetClass::COUNT * feature_dim;
        let params = (0..n)
            .map(|_| {
                if init_scale > 0.0 {
                    rng.random_range(-init_scale..=init_scale)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            vocab,
            feature_dim,
            seed,
            params,
        })
    }

    pub fn dimension(&self) -> usize {
        self.params.len()
    }

    fn offset(&self, kind: AwarenessKind, class: usize) -> usize {
        (kind.index() * TargetClass::COUNT + class) * self.feature_dim
    }

    fn check(&self, enc: &Encoding) -> Result<()> {
        if enc.features.len() != self.feature_dim || enc.base.len() != self.vocab.len() {
            return Err(Error::invalid(format!(
                "encoding has {} features and {} base scores, model expects {} and {}",
                enc.features.len(),
                enc.base.len(),
                self.feature_dim,
                self.vocab.len()
            )));
        }
        Ok(())
    }

    fn class_scores(&self, kind: AwarenessKind, features: &[f64]) -> [f64; TargetClass::COUNT] {
        let mut out = [0.0; TargetClass::COUNT];
        for (c, slot) in out.iter_mut().enumerate() {
            let o = self.offset(kind, c);
            *slot = self.params[o..o + self.feature_dim]
                .iter()
                .zip(features)
                .map(|(a, b)| a * b)
                .sum();
        }
        out
    }

    pub fn scores(&self, kind: AwarenessKind, enc: &Encoding) -> Result<Vec<f64>> {
        self.check(enc)?;
        let cs = self.class_scores(kind, &enc.features);
        Ok(enc
            .base
            .iter()
            .enumerate()
            .map(|(i, b)| b + cs[self.vocab.class(i).index()])
            .collect())
    }

    /// Softmax over the whole vocabulary.
    pub fn probabilities(&self, kind: AwarenessKind, enc: &Encoding) -> Result<Vec<f64>> {
        let s = self.scores(kind, enc)?;
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if s.iter().any(|v| !v.is_finite()) {
            // Overflowed scores poison the loss so training stops.
            return Ok(vec![f64::NAN; s.len()]);
        }
        let exps: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / z).collect())
    }

    /// Highest-scoring phrase; ties go to the lowest index.
    pub fn greedy(&self, kind: AwarenessKind, enc: &Encoding) -> Result<(usize, f64)> {
        let p = self.probabilities(kind, enc)?;
        let (i, v) = p
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        Ok((i, v))
    }

    pub fn encode_group(&self, extractor: &dyn FeatureExtractor, group: &ConsistencyGroup) -> Result<EncodedGroup> {
        group.validate()?;
        if extractor.feature_dim() != self.feature_dim {
            return Err(Error::invalid(format!(
                "extractor yields {} features, model expects {}",
                extractor.feature_dim(),
                self.feature_dim
            )));
        }
        let examples = group
            .examples
            .iter()
            .map(|e| {
                let target = self.vocab.lookup(&e.target_text).ok_or_else(|| {
                    Error::invalid(format!(
                        "target {:?} of group {} is not in the vocabulary",
                        e.target_text, group.group_id
                    ))
                })?;
                let encoding = extractor.encode(e.awareness_kind, &e.prompt_text, &self.vocab)?;
                self.check(&encoding)?;
                Ok(EncodedExample {
                    kind: e.awareness_kind,
                    encoding,
                    target,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedGroup {
            group_id: group.group_id.clone(),
            membership: group.membership,
            examples,
        })
    }

    pub fn encode_groups(&self, extractor: &dyn FeatureExtractor, groups: &[ConsistencyGroup]) -> Result<Vec<EncodedGroup>> {
        groups.iter().map(|g| self.encode_group(extractor, g)).collect()
    }
}

/// Which index pairs the consistency term sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    /// i < j.
    #[default]
    Unordered,
    /// i != j; exactly twice the unordered sum.
    Ordered,
}

impl PairMode {
    fn factor(self) -> f64 {
        match self {
            PairMode::Unordered => 1.0,
            PairMode::Ordered => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// 0 disables the consistency term.
    pub consistency_weight: f64,
    pub pairs: PairMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            consistency_weight: 1.0,
            pairs: PairMode::Unordered,
        }
    }
}

/// `l_con` already includes the consistency weight, so `total` is always
/// the plain sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_unsup: f64,
    pub l_con: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(l_unsup: f64, l_con: f64) -> Self {
        Self {
            l_unsup,
            l_con,
            total: l_unsup + l_con,
        }
    }
}

/// Sum of squared differences over unordered pairs.
pub fn pairwise_gap(p: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            s += (p[i] - p[j]).powi(2);
        }
    }
    s
}

struct Evaluated {
    /// Probability of each example's own target.
    target_p: Vec<f64>,
    /// Per-class probability mass of each example.
    class_p: Vec<[f64; TargetClass::COUNT]>,
}

fn evaluate(model: &ToyModel, group: &EncodedGroup) -> Result<Evaluated> {
    if group.examples.len() != 3 {
        return Err(Error::invalid(format!(
            "group {} has {} examples, expected 3",
            group.group_id,
            group.examples.len()
        )));
    }
    let mut target_p = Vec::with_capacity(3);
    let mut class_p = Vec::with_capacity(3);
    for e in &group.examples {
        if e.target >= model.vocab.len() {
            return Err(Error::invalid(format!(
                "target index {} is outside the vocabulary",
                e.target
            )));
        }
        let p = model.probabilities(e.kind, &e.encoding)?;
        let mut mass = [0.0; TargetClass::COUNT];
        for (i, v) in p.iter().enumerate() {
            mass[model.vocab.class(i).index()] += v;
        }
        target_p.push(p[e.target]);
        class_p.push(mass);
    }
    Ok(Evaluated { target_p, class_p })
}

pub fn loss(model: &ToyModel, group: &EncodedGroup, cfg: &LossConfig) -> Result<LossBreakdown> {
    let ev = evaluate(model, group)?;
    let l_unsup = ev.target_p.iter().map(|p| -p.ln()).sum();
    let l_con = cfg.consistency_weight * cfg.pairs.factor() * pairwise_gap(&ev.target_p);
    Ok(LossBreakdown::new(l_unsup, l_con))
}

/// Analytic gradient of the total loss with respect to the parameters.
pub fn grad_loss(model: &ToyModel, group: &EncodedGroup, cfg: &LossConfig) -> Result<Vec<f64>> {
    let mut g = vec![0.0; model.dimension()];
    accumulate_grad(model, group, cfg, 1.0, &mut g)?;
    Ok(g)
}

fn accumulate_grad(model: &ToyModel, group: &EncodedGroup, cfg: &LossConfig, scale: f64, out: &mut [f64]) -> Result<LossBreakdown> {
    let ev = evaluate(model, group)?;
    let p = &ev.target_p;
    let w = cfg.consistency_weight * cfg.pairs.factor();
    for (i, e) in group.examples.iter().enumerate() {
        // d(total)/d(log P_i): -1 from the NLL, plus the consistency term
        // through dP_i = P_i dlog P_i.
        let gap: f64 = (0..p.len()).filter(|&j| j != i).map(|j| p[i] - p[j]).sum();
        let coef = scale * (-1.0 + w * 2.0 * gap * p[i]);
        let target_class = model.vocab.class(e.target);
        for c in 0..TargetClass::COUNT {
            let indicator = if c == target_class.index() { 1.0 } else { 0.0 };
            let d = coef * (indicator - ev.class_p[i][c]);
            if d == 0.0 {
                continue;
            }
            let o = model.offset(e.kind, c);
            for (slot, f) in out[o..o + model.feature_dim].iter_mut().zip(&e.encoding.features) {
                *slot += d * f;
            }
        }
    }
    let l_unsup = p.iter().map(|v| -v.ln()).sum();
    Ok(LossBreakdown::new(l_unsup, w * pairwise_gap(p)))
}

/// Mean loss and gradient over groups, reduced in input order.
pub fn dataset_loss_and_grad(model: &ToyModel, groups: &[EncodedGroup], cfg: &LossConfig) -> Result<(LossBreakdown, Vec<f64>)> {
    if groups.is_empty() {
        return Err(Error::invalid("no training groups"));
    }
    let scale = 1.0 / groups.len() as f64;
    let mut grad = vec![0.0; model.dimension()];
    let (mut u, mut c) = (0.0, 0.0);
    for g in groups {
        let b = accumulate_grad(model, g, cfg, scale, &mut grad)?;
        u += b.l_unsup * scale;
        c += b.l_con * scale;
    }
    Ok((LossBreakdown::new(u, c), grad))
}

/// Linear warmup from `initial` to `peak`, then constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub peak: f64,
    pub warmup_steps: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.02,
            peak: 0.2,
            warmup_steps: 400,
        }
    }
}

impl LrSchedule {
    pub fn constant(rate: f64) -> Self {
        Self {
            initial: rate,
            peak: rate,
            warmup_steps: 0,
        }
    }

    pub fn rate(&self, step: usize) -> f64 {
        if step >= self.warmup_steps {
            self.peak
        } else {
            self.initial + (self.peak - self.initial) * step as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub schedule: LrSchedule,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            schedule: LrSchedule::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.steps == 0 {
            v.push("steps must be at least 1".to_owned());
        }
        let s = &self.schedule;
        if !(s.initial.is_finite() && s.initial >= 0.0 && s.peak.is_finite() && s.peak >= 0.0) {
            v.push("learning rates must be finite and non-negative".to_owned());
        }
        let w = self.loss.consistency_weight;
        if !(w.is_finite() && w >= 0.0) {
            v.push("consistency_weight must be finite and non-negative".to_owned());
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub l_unsup: f64,
    pub l_con: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Loss at the parameters each step starts from.
    pub records: Vec<StepRecord>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> Result<String> {
        to_jsonl(&self.records)
    }
}

/// Full-batch gradient descent. Fails on the first non-finite loss or
/// parameter.
pub fn train(model: &ToyModel, groups: &[EncodedGroup], cfg: &TrainConfig) -> Result<(ToyModel, TrainingLog)> {
    let problems = cfg.violations();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut m = model.clone();
    let mut log = TrainingLog::default();
    for step in 0..cfg.steps {
        let failure = Error::TrainingFailure {
            step,
            last_good_step: step.checked_sub(1),
        };
        let (b, grad) = dataset_loss_and_grad(&m, groups, &cfg.loss)?;
        if !b.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(failure);
        }
        let lr = cfg.schedule.rate(step);
        log.records.push(StepRecord {
            step,
            lr,
            l_unsup: b.l_unsup,
            l_con: b.l_con,
            total: b.total,
        });
        if lr != 0.0 {
            for (p, g) in m.params.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
            if m.params.iter().any(|p| !p.is_finite()) {
                return Err(failure);
            }
        }
    }
    Ok((m, log))
}

/// Settings recorded alongside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dimension: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub parameter_layout: String,
    pub pair_mode: PairMode,
    pub consistency_weight: f64,
    pub target_probability: String,
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub vocabulary: Vocabulary,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(model: &ToyModel, train: Option<TrainConfig>) -> Self {
        let loss = train.map(|t| t.loss).unwrap_or_default();
        Self {
            header: CheckpointHeader {
                format_version: 1,
                dimension: model.dimension(),
                feature_dim: model.feature_dim,
                seed: model.seed,
                parameter_layout: "kind(prior,direct,posterior) x class(answer,unknown,yes,no,sure,unsure) x feature"
                    .into(),
                pair_mode: loss.pairs,
                consistency_weight: loss.consistency_weight,
                target_probability: "single softmax over whole candidate phrases".into(),
                train,
            },
            vocabulary: model.vocab.clone(),
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<ToyModel> {
        let h = &self.header;
        if h.dimension != self.params.len() || h.dimension != 3 * TargetClass::COUNT * h.feature_dim {
            return Err(Error::invalid(format!(
                "checkpoint declares {} parameters ({} features) but holds {}",
                h.dimension,
                h.feature_dim,
                self.params.len()
            )));
        }
        Ok(ToyModel {
            vocab: self.vocabulary,
            feature_dim: h.feature_dim,
            seed: h.seed,
            params: self.params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn vocab() -> Vocabulary {
        Vocabulary::new(["Paris", "Lyon", "Nice"], &TemplateSet::default()).unwrap()
    }

    /// Random group with the standard target layout.
    pub(crate) fn random_group(rng: &mut ChaCha8Rng, vocab: &Vocabulary, dim: usize, known: bool) -> EncodedGroup {
        let answer = vocab.lookup("Paris").unwrap();
        let targets = if known {
            [vocab.lookup("Yes").unwrap(), answer, vocab.lookup("Sure").unwrap()]
        } else {
            [
                vocab.lookup("No").unwrap(),
                vocab.lookup("Unknown").unwrap(),
                vocab.lookup("Unsure").unwrap(),
            ]
        };
        let examples = AwarenessKind::ALL
            .into_iter()
            .zip(targets)
            .map(|(kind, target)| EncodedExample {
                kind,
                encoding: Encoding {
                    features: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    base: (0..vocab.len()).map(|_| rng.random_range(-2.0..2.0)).collect(),
                },
                target,
            })
            .collect();
        EncodedGroup {
            group_id: "g".into(),
            membership: if known { Membership::Known } else { Membership::Unknown },
            examples,
        }
    }

    /// Loss recomputed phrase by phrase, without class grouping.
    pub(crate) fn brute_force_loss(model: &ToyModel, g: &EncodedGroup, cfg: &LossConfig) -> (f64, f64) {
        let mut ps = Vec::new();
        for e in &g.examples {
            let mut exps = Vec::new();
            for y in 0..model.vocab.len() {
                let c = model.vocab.class(y).index();
                let o = (e.kind.index() * 6 + c) * model.feature_dim;
                let mut s = e.encoding.base[y];
                for k in 0..model.feature_dim {
                    s += model.params[o + k] * e.encoding.features[k];
                }
                exps.push(s.exp());
            }
            let z: f64 = exps.iter().sum();
            ps.push(exps[e.target] / z);
        }
        let nll = -ps.iter().map(|p| p.ln()).sum::<f64>();
        let mut con = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let counted = match cfg.pairs {
                    PairMode::Unordered => i < j,
                    PairMode::Ordered => i != j,
                };
                if counted {
                    con += (ps[i] - ps[j]).powi(2);
                }
            }
        }
        (nll, cfg.consistency_weight * con)
    }

    pub(crate) fn finite_difference(model: &ToyModel, g: &EncodedGroup, cfg: &LossConfig, h: f64) -> Vec<f64> {
        (0..model.dimension())
            .map(|k| {
                let mut plus = model.clone();
                plus.params[k] += h;
                let mut minus = model.clone();
                minus.params[k] -= h;
                (loss(&plus, g, cfg).unwrap().total - loss(&minus, g, cfg).unwrap().total) / (2.0 * h)
            })
            .collect()
    }

    pub(crate) fn relative_error(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    #[test]
    fn hand_computed_consistency_term() {
        assert!((pairwise_gap(&[0.8, 0.6, 0.6]) - 0.08).abs() < 1e-12);
        assert_eq!(pairwise_gap(&[0.3, 0.3, 0.3]), 0.0);
    }

    #[test]
    fn vocabulary_rejects_collisions() {
        assert!(Vocabulary::new(["Yes"], &TemplateSet::default()).unwrap().len() == 5);
        let v = vocab();
        assert_eq!(v.class(v.lookup("Unsure").unwrap()), TargetClass::Unsure);
        assert_eq!(v.class(v.lookup("Lyon").unwrap()), TargetClass::Answer);
        assert!(Vocabulary::from_parts(vec!["a".into(), "a".into()], vec![TargetClass::Answer; 2]).is_err());
    }

    #[test]
    fn out_of_vocabulary_target_is_rejected() {
        let model = ToyModel::new(vocab(), 3, 0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = random_group(&mut rng, &model.vocab, 3, true);
        g.examples[1].target = 99;
        assert!(matches!(loss(&model, &g, &LossConfig::default()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for draw in 0..20 {
            let model = ToyModel::new(vocab(), 4, draw, 1.0).unwrap();
            let g = random_group(&mut rng, &model.vocab, 4, draw % 2 == 0);
            let cfg = LossConfig::default();
            let a = grad_loss(&model, &g, &cfg).unwrap();
            let n = finite_difference(&model, &g, &cfg, 1e-5);
            for (x, y) in a.iter().zip(&n) {
                assert!(relative_error(*x, *y) < 1e-4, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn ordered_pairs_double_consistency_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = ToyModel::new(vocab(), 3, 3, 1.0).unwrap();
        let g = random_group(&mut rng, &model.vocab, 3, false);
        let nll_only = LossConfig {
            consistency_weight: 0.0,
            ..Default::default()
        };
        let base = grad_loss(&model, &g, &nll_only).unwrap();
        let un = grad_loss(&model, &g, &LossConfig::default()).unwrap();
        let ord = grad_loss(
            &model,
            &g,
            &LossConfig {
                pairs: PairMode::Ordered,
                ..Default::default()
            },
        )
        .unwrap();
        for k in 0..base.len() {
            let c_un = un[k] - base[k];
            let c_ord = ord[k] - base[k];
            assert!((c_ord - 2.0 * c_un).abs() < 1e-12);
        }
        let lu = loss(&model, &g, &LossConfig::default()).unwrap();
        let lo = loss(&model, &g, &LossConfig { pairs: PairMode::Ordered, ..Default::default() }).unwrap();
        assert!((lo.l_con - 2.0 * lu.l_con).abs() < 1e-15);
    }

    #[test]
    fn consistency_gradient_vanishes_at_fixed_point() {
        // Identical encodings and equal-probability targets.
        let model = ToyModel::new(vocab(), 2, 0, 0.0).unwrap();
        let enc = Encoding {
            features: vec![1.0, 0.5],
            base: vec![0.0; model.vocab.len()],
        };
        let g = EncodedGroup {
            group_id: "g".into(),
            membership: Membership::Unknown,
            examples: [("No", AwarenessKind::Prior), ("Unknown", AwarenessKind::Direct), ("Unsure", AwarenessKind::Posterior)]
                .into_iter()
                .map(|(t, kind)| EncodedExample {
                    kind,
                    encoding: enc.clone(),
                    target: model.vocab.lookup(t).unwrap(),
                })
                .collect(),
        };
        let with = grad_loss(&model, &g, &LossConfig::default()).unwrap();
        let without = grad_loss(&model, &g, &LossConfig { consistency_weight: 0.0, ..Default::default() }).unwrap();
        assert_eq!(with, without);
        assert_eq!(loss(&model, &g, &LossConfig::default()).unwrap().l_con, 0.0);
    }

    #[test]
    fn zero_rate_keeps_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = ToyModel::new(vocab(), 3, 5, 0.5).unwrap();
        let groups: Vec<_> = (0..4).map(|i| random_group(&mut rng, &model.vocab, 3, i % 2 == 0)).collect();
        let cfg = TrainConfig {
            steps: 10,
            schedule: LrSchedule::constant(0.0),
            loss: LossConfig::default(),
        };
        let (trained, log) = train(&model, &groups, &cfg).unwrap();
        assert_eq!(trained.params, model.params);
        assert_eq!(log.records.len(), 10);
    }

    #[test]
    fn single_group_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = ToyModel::new(vocab(), 3, 11, 0.1).unwrap();
        let g = random_group(&mut rng, &model.vocab, 3, false);
        let cfg = TrainConfig {
            steps: 3000,
            schedule: LrSchedule::constant(1.0),
            loss: LossConfig::default(),
        };
        let (trained, _) = train(&model, std::slice::from_ref(&g), &cfg).unwrap();
        let b = loss(&trained, &g, &LossConfig::default()).unwrap();
        assert!(b.l_con < 1e-3, "{b:?}");
        for e in &g.examples {
            let p = trained.probabilities(e.kind, &e.encoding).unwrap();
            assert!(p[e.target] > 0.99);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = ToyModel::new(vocab(), 3, 2, 0.1).unwrap();
        let mut g = random_group(&mut rng, &model.vocab, 3, true);
        for e in &mut g.examples {
            e.encoding.features.iter_mut().for_each(|f| *f *= 1e300);
        }
        let cfg = TrainConfig {
            steps: 50,
            schedule: LrSchedule::constant(1e100),
            loss: LossConfig::default(),
        };
        match train(&model, &[g], &cfg) {
            Err(Error::TrainingFailure { step, last_good_step }) => {
                assert_eq!(last_good_step, step.checked_sub(1));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = ToyModel::new(vocab(), 3, 9, 0.3).unwrap();
        let path = dir.path().join("model.json");
        Checkpoint::new(&model, Some(TrainConfig::default())).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().into_model().unwrap();
        assert_eq!(back, model);
    }

    proptest! {
        #[test]
        fn probabilities_form_a_distribution(seed in any::<u64>(), scale in 0.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = ToyModel::new(vocab(), 3, seed, scale).unwrap();
            let g = random_group(&mut rng, &model.vocab, 3, true);
            for e in &g.examples {
                let p = model.probabilities(e.kind, &e.encoding).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }

        #[test]
        fn consistency_term_is_permutation_invariant(a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0) {
            let base = pairwise_gap(&[a, b, c]);
            for perm in [[a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]] {
                prop_assert!((pairwise_gap(&perm) - base).abs() < 1e-15);
            }
        }

        #[test]
        fn loss_matches_brute_force(seed in any::<u64>(), known in any::<bool>(), w in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = ToyModel::new(vocab(), 4, seed, 1.5).unwrap();
            let g = random_group(&mut rng, &model.vocab, 4, known);
            let cfg = LossConfig { consistency_weight: w, pairs: PairMode::Unordered };
            let b = loss(&model, &g, &cfg).unwrap();
            let (nll, con) = brute_force_loss(&model, &g, &cfg);
            prop_assert!((b.l_unsup - nll).abs() < 1e-9 * nll.max(1.0));
            prop_assert!((b.l_con - con).abs() < 1e-12);
            prop_assert!((b.total - (b.l_unsup + b.l_con)).abs() <= 1e-12);
        }
    }
}
