//! A generated question universe with a planted confidence signal.
//!
//! Each question has a hidden confidence `c`. Answerable questions draw `c`
//! from a high band and are answered correctly; the rest draw from a low
//! band and get a wrong answer. The reference endpoint emits the greedy
//! answer with a minimum token probability of exactly `c`. Per-prompt-kind
//! features are fixed random views of `[s(2c - 1), nuisance...]`, so a model
//! trained on them has to learn where each kind's boundary lies. The planted
//! prompt baselines read `c` through their own per-question jitter.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::BaselinePrompts;
use crate::probe::{
    Completion, CompletionEndpoint, CompletionRequest, EndpointError, GeneratedToken, QuestionRecord,
};
use crate::prompts::{AwarenessKind, TemplateSet, ANSWER_SLOT, QUESTION_SLOT};
use crate::toy_trainer::{Encoding, FeatureExtractor, TargetClass, ToyModel, Vocabulary};

const FIRST: [&str; 24] = [
    "Amber", "Basalt", "Cedar", "Delta", "Ember", "Fjord", "Garnet", "Harbor", "Indigo", "Juniper", "Kestrel",
    "Lumen", "Marble", "Nimbus", "Onyx", "Pebble", "Quartz", "Raven", "Saffron", "Tundra", "Umber", "Vesper",
    "Willow", "Zephyr",
];
const SECOND: [&str; 16] = [
    "Falcon", "River", "Summit", "Lantern", "Meadow", "Anchor", "Comet", "Orchard", "Beacon", "Canyon",
    "Thistle", "Harp", "Glacier", "Spire", "Bramble", "Mesa",
];
const THIRD: [&str; 8] = ["Ridge", "Crossing", "Hollow", "Point", "Reach", "Gate", "Field", "Bay"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub questions: usize,
    pub answerable_share: f64,
    /// Confidence band of answerable questions.
    pub known_band: (f64, f64),
    /// Confidence band of unanswerable questions.
    pub unknown_band: (f64, f64),
    /// Multiplier `s` on the confidence coordinate of the hidden state.
    pub signal_scale: f64,
    pub nuisance_dims: usize,
    /// Standard deviation of the nuisance coordinates.
    pub nuisance_scale: f64,
    /// Rows of each per-kind random view; features add a constant 1.
    pub view_dim: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            questions: 500,
            answerable_share: 0.6,
            known_band: (0.45, 1.0),
            unknown_band: (0.01, 0.55),
            signal_scale: 0.3,
            nuisance_dims: 0,
            nuisance_scale: 1.0,
            view_dim: 8,
        }
    }
}

impl WorldConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.questions == 0 {
            v.push("questions must be at least 1".to_owned());
        }
        if !(0.0..=1.0).contains(&self.answerable_share) {
            v.push("answerable_share must lie in [0, 1]".to_owned());
        }
        for (name, (lo, hi)) in [("known_band", self.known_band), ("unknown_band", self.unknown_band)] {
            if !(lo > 0.0 && lo < hi && hi <= 1.0) {
                v.push(format!("{name} must satisfy 0 < lo < hi <= 1"));
            }
        }
        if !(self.signal_scale.is_finite() && self.signal_scale > 0.0) {
            v.push("signal_scale must be finite and positive".to_owned());
        }
        if !(self.nuisance_scale.is_finite() && self.nuisance_scale >= 0.0) {
            v.push("nuisance_scale must be finite and non-negative".to_owned());
        }
        if self.view_dim == 0 {
            v.push("view_dim must be at least 1".to_owned());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticQuestion {
    pub record: QuestionRecord,
    pub answerable: bool,
    pub confidence: f64,
    /// Greedy answer split into tokens, with the probability of each.
    pub tokens: Vec<String>,
    pub probs: Vec<f64>,
    /// `[s(2c - 1), nuisance...]`.
    pub hidden: Vec<f64>,
    /// Standard normal draws behind the planted baseline responses.
    pub jitter: [f64; 4],
}

impl SyntheticQuestion {
    pub fn greedy(&self) -> String {
        self.tokens.concat()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub templates: TemplateSet,
    pub baselines: BaselinePrompts,
    questions: Vec<SyntheticQuestion>,
    by_text: HashMap<String, usize>,
    /// One `view_dim x hidden_dim` matrix per awareness kind.
    views: Vec<Vec<Vec<f64>>>,
}

fn phrase(rng: &mut ChaCha8Rng) -> Vec<String> {
    let words = rng.random_range(1..=3);
    let mut out = vec![FIRST[rng.random_range(0..FIRST.len())].to_owned()];
    if words >= 2 {
        out.push(format!(" {}", SECOND[rng.random_range(0..SECOND.len())]));
    }
    if words == 3 {
        out.push(format!(" {}", THIRD[rng.random_range(0..THIRD.len())]));
    }
    out
}

impl SyntheticWorld {
    pub fn generate(config: WorldConfig) -> Result<Self> {
        let problems = config.violations();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = config.questions;
        let answerable_count = (config.answerable_share * n as f64).round() as usize;
        let mut answerable: Vec<bool> = (0..n).map(|i| i < answerable_count).collect();
        answerable.shuffle(&mut rng);

        let hidden_dim = 1 + config.nuisance_dims;
        let views = (0..3)
            .map(|_| {
                (0..config.view_dim)
                    .map(|_| {
                        (0..hidden_dim)
                            .map(|_| rng.sample::<f64, _>(StandardNormal) / (hidden_dim as f64).sqrt())
                            .collect()
                    })
                    .collect()
            })
            .collect();

        let mut questions = Vec::with_capacity(n);
        for (i, &ok) in answerable.iter().enumerate() {
            let (lo, hi) = if ok { config.known_band } else { config.unknown_band };
            let c = rng.random_range(lo..=hi);
            let gold = phrase(&mut rng);
            let tokens = if ok {
                gold.clone()
            } else {
                loop {
                    let wrong = phrase(&mut rng);
                    if wrong.concat() != gold.concat() {
                        break wrong;
                    }
                }
            };
            let low = rng.random_range(0..tokens.len());
            let probs = (0..tokens.len())
                .map(|j| if j == low { c } else { rng.random_range(c..=1.0) })
                .collect();
            let mut hidden = vec![config.signal_scale * (2.0 * c - 1.0)];
            hidden.extend(
                (0..config.nuisance_dims).map(|_| config.nuisance_scale * rng.sample::<f64, _>(StandardNormal)),
            );
            let jitter = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
            questions.push(SyntheticQuestion {
                record: QuestionRecord {
                    id: format!("syn-{i:04}"),
                    text: format!("What is the registered name of specimen S-{i:04}?"),
                    gold_answers: vec![gold.concat()],
                    source: format!("synthetic:{}", config.seed),
                },
                answerable: ok,
                confidence: c,
                tokens,
                probs,
                hidden,
                jitter,
            });
        }
        let by_text = questions
            .iter()
            .enumerate()
            .map(|(i, q)| (q.record.text.clone(), i))
            .collect();
        Ok(Self {
            config,
            templates: TemplateSet::default(),
            baselines: BaselinePrompts::default(),
            questions,
            by_text,
            views,
        })
    }

    pub fn questions(&self) -> &[SyntheticQuestion] {
        &self.questions
    }

    pub fn records(&self) -> Vec<QuestionRecord> {
        self.questions.iter().map(|q| q.record.clone()).collect()
    }

    pub fn question_by_text(&self, text: &str) -> Option<&SyntheticQuestion> {
        self.by_text.get(text).map(|&i| &self.questions[i])
    }

    /// Every answer phrase the world can produce plus the control phrases.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let mut answers = Vec::new();
        for q in &self.questions {
            answers.push(q.greedy());
            answers.extend(q.record.gold_answers.iter().cloned());
        }
        Vocabulary::new(answers, &self.templates)
    }

    fn features(&self, kind: AwarenessKind, q: &SyntheticQuestion) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.config.view_dim + 1);
        out.push(1.0);
        for row in &self.views[kind.index()] {
            out.push(row.iter().zip(&q.hidden).map(|(a, b)| a * b).sum());
        }
        out
    }

    /// Fixed prior preferences: the kind's affirmative target leads, its
    /// negative target follows, everything else trails.
    fn base_scores(&self, kind: AwarenessKind, q: &SyntheticQuestion, vocab: &Vocabulary) -> Vec<f64> {
        let greedy = q.greedy();
        (0..vocab.len())
            .map(|i| match (kind, vocab.class(i)) {
                (AwarenessKind::Direct, TargetClass::Answer) if vocab.phrase(i) == greedy => 4.0,
                (AwarenessKind::Direct, TargetClass::Unknown) => 0.0,
                (AwarenessKind::Prior, TargetClass::Yes) => 2.0,
                (AwarenessKind::Prior, TargetClass::No) => 0.0,
                (AwarenessKind::Posterior, TargetClass::Sure) => 1.5,
                (AwarenessKind::Posterior, TargetClass::Unsure) => 0.0,
                (_, TargetClass::Answer) => -8.0,
                _ => -4.0,
            })
            .collect()
    }

    /// Finds the awareness kind and question a prompt was rendered from.
    pub fn parse_awareness(&self, prompt: &str) -> Option<(AwarenessKind, &SyntheticQuestion)> {
        [AwarenessKind::Posterior, AwarenessKind::Prior, AwarenessKind::Direct]
            .into_iter()
            .find_map(|kind| {
                let slots = match_pattern(&self.templates.get(kind).pattern, prompt)?;
                Some((kind, self.question_by_text(&slots.question?)?))
            })
    }

    /// Question whose text occurs last in `prompt`.
    fn last_question_in(&self, prompt: &str) -> Option<&SyntheticQuestion> {
        self.questions
            .iter()
            .filter_map(|q| prompt.rfind(&q.record.text).map(|pos| (pos, q)))
            .max_by_key(|(pos, _)| *pos)
            .map(|(_, q)| q)
    }

    /// Planted responses of the reference model.
    fn reference_response(&self, prompt: &str) -> Option<Vec<GeneratedToken>> {
        let b = &self.baselines;
        let fixed = |text: &str| vec![GeneratedToken { text: text.to_owned(), logprob: 0.0 }];
        let answer = |q: &SyntheticQuestion| {
            q.tokens
                .iter()
                .zip(&q.probs)
                .map(|(t, p)| GeneratedToken { text: t.clone(), logprob: p.ln() })
                .collect::<Vec<_>>()
        };
        let question = |pattern: &str, text: &str| {
            match_pattern(pattern, text)
                .and_then(|s| s.question)
                .and_then(|t| self.question_by_text(&t))
        };
        if let Some(q) = question(&b.prior, prompt) {
            let yes = q.confidence + 0.2 * q.jitter[0] >= 0.5;
            return Some(fixed(if yes { "Yes" } else { "No" }));
        }
        if let Some(q) = question(&b.posterior, prompt) {
            let sure = q.confidence + 0.2 * q.jitter[1] >= 0.45;
            return Some(fixed(if sure { "Sure" } else { "Unsure" }));
        }
        if let Some(q) = question(&b.verb, prompt) {
            let v = (q.confidence + 0.1 * q.jitter[2]).clamp(0.0, 1.0);
            return Some(fixed(&format!("{}", (100.0 * v).round())));
        }
        let last_block = prompt.rsplit("\n\n").next().unwrap_or(prompt);
        if prompt.contains("\n\n") {
            if let Some(q) = question(&b.ic_idk_query, last_block) {
                return Some(if q.confidence + 0.2 * q.jitter[3] >= 0.35 {
                    answer(q)
                } else {
                    fixed(&b.ic_idk_unknown)
                });
            }
        }
        match self.parse_awareness(prompt) {
            Some((AwarenessKind::Prior, _)) => return Some(fixed(&self.templates.prior.target_known_pattern)),
            Some((AwarenessKind::Posterior, _)) => {
                return Some(fixed(&self.templates.posterior.target_known_pattern))
            }
            _ => {}
        }
        self.last_question_in(prompt).map(answer)
    }
}

impl FeatureExtractor for SyntheticWorld {
    fn feature_dim(&self) -> usize {
        self.config.view_dim + 1
    }

    fn encode(&self, kind: AwarenessKind, prompt: &str, vocab: &Vocabulary) -> Result<Encoding> {
        let q = match_pattern(&self.templates.get(kind).pattern, prompt)
            .and_then(|s| s.question)
            .and_then(|t| self.question_by_text(&t))
            .ok_or_else(|| Error::invalid(format!("prompt is not a {kind} prompt about a known question")))?;
        Ok(Encoding {
            features: self.features(kind, q),
            base: self.base_scores(kind, q, vocab),
        })
    }
}

/// Slot values recovered from a rendered prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Slots {
    pub question: Option<String>,
    pub answer: Option<String>,
}

enum Piece<'a> {
    Lit(&'a str),
    Question,
    Answer,
}

fn pieces(pattern: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = pattern;
    loop {
        let q = rest.find(QUESTION_SLOT).map(|i| (i, QUESTION_SLOT, Piece::Question));
        let a = rest.find(ANSWER_SLOT).map(|i| (i, ANSWER_SLOT, Piece::Answer));
        let next = match (q, a) {
            (Some(x), Some(y)) => Some(if x.0 <= y.0 { x } else { y }),
            (x, y) => x.or(y),
        };
        let Some((i, slot, piece)) = next else {
            if !rest.is_empty() {
                out.push(Piece::Lit(rest));
            }
            return out;
        };
        if i > 0 {
            out.push(Piece::Lit(&rest[..i]));
        }
        out.push(piece);
        rest = &rest[i + slot.len()..];
    }
}

/// Inverts `fill_slots`: recovers slot values when `text` was rendered
/// from `pattern`. Adjacent slots are not supported.
pub fn match_pattern(pattern: &str, text: &str) -> Option<Slots> {
    let pieces = pieces(pattern);
    let mut slots = Slots::default();
    let mut rest = text;
    let mut i = 0;
    while i < pieces.len() {
        match pieces[i] {
            Piece::Lit(l) => rest = rest.strip_prefix(l)?,
            Piece::Question | Piece::Answer => {
                let value = match pieces.get(i + 1) {
                    None => std::mem::take(&mut rest),
                    Some(Piece::Lit(l)) if i + 2 == pieces.len() => {
                        let v = rest.strip_suffix(l)?;
                        rest = l;
                        v
                    }
                    Some(Piece::Lit(l)) => {
                        let at = rest.find(l)?;
                        let v = &rest[..at];
                        rest = &rest[at..];
                        v
                    }
                    Some(_) => return None,
                };
                let slot = if matches!(pieces[i], Piece::Question) {
                    &mut slots.question
                } else {
                    &mut slots.answer
                };
                *slot = Some(value.to_owned());
            }
        }
        i += 1;
    }
    rest.is_empty().then_some(slots)
}

/// Serves the synthetic world as a completion endpoint, either as the
/// planted reference model or through a toy model.
pub struct SyntheticEndpoint {
    world: Arc<SyntheticWorld>,
    model: Option<ToyModel>,
    name: String,
}

impl SyntheticEndpoint {
    pub fn reference(world: Arc<SyntheticWorld>) -> Self {
        let name = format!("synthetic-reference-{}", world.config.seed);
        Self {
            world,
            model: None,
            name,
        }
    }

    /// Awareness prompts are answered by `model`; everything else falls
    /// back to the reference behaviour.
    pub fn with_model(world: Arc<SyntheticWorld>, model: ToyModel, name: impl Into<String>) -> Self {
        Self {
            world,
            model: Some(model),
            name: name.into(),
        }
    }

    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }

    fn model_response(&self, model: &ToyModel, prompt: &str) -> Option<Result<Vec<GeneratedToken>, EndpointError>> {
        let (kind, _) = self.world.parse_awareness(prompt)?;
        let out = self
            .world
            .encode(kind, prompt, &model.vocab)
            .and_then(|enc| model.greedy(kind, &enc))
            .map(|(i, p)| {
                let mut tokens = split_words(model.vocab.phrase(i));
                tokens[0].logprob = p.ln();
                tokens
            })
            .map_err(|e| EndpointError::Malformed(e.to_string()));
        Some(out)
    }
}

fn split_words(text: &str) -> Vec<GeneratedToken> {
    text.split(' ')
        .enumerate()
        .map(|(i, w)| GeneratedToken {
            text: if i == 0 { w.to_owned() } else { format!(" {w}") },
            logprob: 0.0,
        })
        .collect()
}

impl CompletionEndpoint for SyntheticEndpoint {
    fn model(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, EndpointError> {
        let tokens = match &self.model {
            Some(m) => self.model_response(m, &request.prompt),
            None => None,
        }
        .unwrap_or_else(|| {
            self.world
                .reference_response(&request.prompt)
                .ok_or_else(|| EndpointError::Malformed("prompt mentions no synthetic question".into()))
        })?;
        Ok(Completion {
            model: self.name.clone(),
            tokens: tokens.into_iter().take(request.max_new_tokens as usize).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::fill_slots;

    fn world() -> SyntheticWorld {
        SyntheticWorld::generate(WorldConfig {
            seed: 3,
            questions: 100,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn pattern_round_trip() {
        for pattern in [
            "Are you sure that the answer to the '{question}' is '{answer}'",
            "Answer the question '{question}'",
            "{question}",
            "Q: {question}\nA:",
            "{answer} then {question}!",
        ] {
            let text = fill_slots(pattern, "Who? 'x'", "Paris");
            let s = match_pattern(pattern, &text).unwrap();
            assert_eq!(s.question.as_deref(), Some("Who? 'x'"));
            if pattern.contains(ANSWER_SLOT) {
                assert_eq!(s.answer.as_deref(), Some("Paris"));
            }
        }
        assert!(match_pattern("Answer the question '{question}'", "Answer it").is_none());
    }

    #[test]
    fn planted_bands_and_min_probability() {
        let w = world();
        let answerable = w.questions().iter().filter(|q| q.answerable).count();
        assert_eq!(answerable, 60);
        for q in w.questions() {
            let min = q.probs.iter().copied().fold(1.0, f64::min);
            assert_eq!(min, q.confidence);
            let (lo, hi) = if q.answerable { w.config.known_band } else { w.config.unknown_band };
            assert!(q.confidence >= lo && q.confidence <= hi);
            assert_eq!(q.answerable, q.record.gold_answers[0] == q.greedy());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = world();
        let b = world();
        assert_eq!(a.questions(), b.questions());
    }

    #[test]
    fn reference_endpoint_answers_direct_prompts() {
        let w = Arc::new(world());
        let ep = SyntheticEndpoint::reference(w.clone());
        let q = &w.questions()[5];
        let prompt = w.templates.direct.render(&q.record.text, None).unwrap();
        let c = ep
            .complete(&CompletionRequest {
                prompt,
                max_new_tokens: 32,
                stop: vec![],
            })
            .unwrap();
        let text: String = c.tokens.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(text, q.greedy());
    }

    #[test]
    fn untrained_model_answers_like_reference() {
        let w = Arc::new(world());
        let vocab = w.vocabulary().unwrap();
        let model = ToyModel::new(vocab, w.feature_dim(), 1, 0.0).unwrap();
        let ep = SyntheticEndpoint::with_model(w.clone(), model, "toy");
        for q in w.questions().iter().take(10) {
            for (kind, want) in [
                (AwarenessKind::Prior, "Yes".to_owned()),
                (AwarenessKind::Direct, q.greedy()),
                (AwarenessKind::Posterior, "Sure".to_owned()),
            ] {
                let a = (kind == AwarenessKind::Posterior).then(|| q.greedy());
                let prompt = w.templates.get(kind).render(&q.record.text, a.as_deref()).unwrap();
                let c = ep
                    .complete(&CompletionRequest {
                        prompt,
                        max_new_tokens: 32,
                        stop: vec![],
                    })
                    .unwrap();
                let text: String = c.tokens.iter().map(|t| t.text.as_str()).collect();
                assert_eq!(text, want);
            }
        }
    }
}
