//! Scoring knowledge-boundary expression.
//!
//! A test set is split once by whether a reference model's greedy answer is
//! correct (`t_k`) or not (`t_unk`). A method is then scored by:
//!
//! * `k_aware`: share of correct answers on `t_k`,
//! * `u_aware`: share of unknown expressions or correct answers on `t_unk`,
//! * `s_aware`: the mean of the two.
//!
//! Percentages are kept exact as count ratios and only rounded (one
//! decimal, half-up) when a report is serialized.

mod baselines;
mod histogram;
mod search;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use baselines::{
    awareness_eval, prompt_baseline, AwarenessEvalRun, BaselineContext, BaselinePrompts, BaselineRun,
    Demonstration, PromptBaselineMode, VerbTraining,
};
pub use histogram::{confidence_histogram, Histogram, HistogramBin};
pub use search::{
    apply_threshold, candidate_thresholds, search_threshold, uncertainty_baseline, ThresholdItem,
    ThresholdSearch,
};

use crate::error::{Error, Result};
use crate::partition::Membership;
use crate::probe::{ProbeResult, QuestionRecord};
use crate::prompts::{AwarenessKind, TemplateSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Correct,
    #[serde(rename = "unknown")]
    UnknownExpr,
    Wrong,
}

/// Lowercases, removes punctuation, collapses whitespace and drops leading
/// articles.
pub fn normalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped: String = lowered
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    let mut words: &[&str] = &stripped.split_whitespace().collect::<Vec<_>>();
    while let Some((first, rest)) = words.split_first() {
        if matches!(*first, "a" | "an" | "the") {
            words = rest;
        } else {
            break;
        }
    }
    words.join(" ")
}

/// Phrases that count as an expression of not knowing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnknownLexicon {
    phrases: Vec<String>,
}

impl Default for UnknownLexicon {
    fn default() -> Self {
        Self::new(["unknown", "unknow", "i don't know", "i do not know", "unsure"])
    }
}

impl UnknownLexicon {
    pub fn new<S: AsRef<str>>(phrases: impl IntoIterator<Item = S>) -> Self {
        let mut phrases: Vec<String> = phrases
            .into_iter()
            .map(|p| normalize(p.as_ref()))
            .filter(|p| !p.is_empty())
            .collect();
        phrases.sort();
        phrases.dedup();
        Self { phrases }
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    /// True when the normalized response starts with a lexicon phrase on a
    /// word boundary.
    pub fn matches(&self, response: &str) -> bool {
        starts_with_any(&normalize(response), &self.phrases)
    }
}

fn starts_with_any(normalized: &str, phrases: &[String]) -> bool {
    phrases.iter().any(|p| {
        normalized == p
            || normalized
                .strip_prefix(p.as_str())
                .is_some_and(|rest| rest.starts_with(' '))
    })
}

pub fn classify_response(response: &str, gold: &[String], lexicon: &UnknownLexicon) -> Classification {
    let norm = normalize(response);
    if starts_with_any(&norm, lexicon.phrases()) {
        return Classification::UnknownExpr;
    }
    if !norm.is_empty() && gold.iter().any(|g| normalize(g) == norm) {
        Classification::Correct
    } else {
        Classification::Wrong
    }
}

/// Exact `num / den` percentage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        Self { num, den }
    }

    pub fn percent(&self) -> f64 {
        100.0 * self.num as f64 / self.den as f64
    }

    /// Percentage in tenths, rounded half-up.
    pub fn percent_tenths(&self) -> u64 {
        half_up_tenths(self.num as u128, self.den as u128)
    }

    pub fn percent_rounded(&self) -> f64 {
        self.percent_tenths() as f64 / 10.0
    }
}

/// `round_half_up(1000 * num / den)`, the percentage in tenths.
fn half_up_tenths(num: u128, den: u128) -> u64 {
    ((2000 * num + den) / (2 * den)) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub t_k: BTreeSet<String>,
    pub t_unk: BTreeSet<String>,
    pub reference_model_id: String,
    /// `|t_k|` over the total, as a percentage.
    pub accuracy: f64,
}

impl SplitSpec {
    pub fn new(t_k: BTreeSet<String>, t_unk: BTreeSet<String>, reference_model_id: impl Into<String>) -> Result<Self> {
        if let Some(id) = t_k.intersection(&t_unk).next() {
            return Err(Error::invalid(format!("{id} is in both t_k and t_unk")));
        }
        let total = t_k.len() + t_unk.len();
        if total == 0 {
            return Err(Error::invalid("split is empty"));
        }
        let accuracy = Ratio::new(t_k.len() as u64, total as u64).percent();
        Ok(Self {
            t_k,
            t_unk,
            reference_model_id: reference_model_id.into(),
            accuracy,
        })
    }

    pub fn accuracy_ratio(&self) -> Ratio {
        Ratio::new(self.t_k.len() as u64, (self.t_k.len() + self.t_unk.len()) as u64)
    }

    pub fn membership(&self, id: &str) -> Option<Membership> {
        if self.t_k.contains(id) {
            Some(Membership::Known)
        } else if self.t_unk.contains(id) {
            Some(Membership::Unknown)
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.t_k.len() + self.t_unk.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Recomputes the accuracy from the id sets and checks the stored value.
    pub fn verify(&self) -> Result<()> {
        if let Some(id) = self.t_k.intersection(&self.t_unk).next() {
            return Err(Error::invalid(format!("{id} is in both t_k and t_unk")));
        }
        if self.accuracy_ratio().percent() != self.accuracy {
            return Err(Error::invalid("stored accuracy does not match the split"));
        }
        Ok(())
    }
}

/// Gold answers by question id.
pub fn gold_index(questions: &[QuestionRecord]) -> HashMap<&str, &[String]> {
    questions
        .iter()
        .map(|q| (q.id.as_str(), q.gold_answers.as_slice()))
        .collect()
}

pub fn build_split(probe: &[ProbeResult], questions: &[QuestionRecord], lexicon: &UnknownLexicon) -> Result<SplitSpec> {
    if let Some(q) = questions.iter().find(|q| q.gold_answers.is_empty()) {
        return Err(Error::invalid(format!("question {} has no gold answers", q.id)));
    }
    let gold = gold_index(questions);
    let mut t_k = BTreeSet::new();
    let mut t_unk = BTreeSet::new();
    let mut model = None;
    for r in probe {
        let g = gold
            .get(r.question_id.as_str())
            .ok_or_else(|| Error::invalid(format!("probe result for unknown question {}", r.question_id)))?;
        model.get_or_insert_with(|| r.model_id.clone());
        let set = match classify_response(&r.prediction, g, lexicon) {
            Classification::Correct => &mut t_k,
            _ => &mut t_unk,
        };
        if !set.insert(r.question_id.clone()) {
            return Err(Error::invalid(format!("duplicate probe result for {}", r.question_id)));
        }
    }
    SplitSpec::new(t_k, t_unk, model.unwrap_or_default())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub question_id: String,
    pub response: String,
    pub classification: Classification,
    pub membership: Membership,
}

impl EvalOutcome {
    pub fn classify(
        question_id: &str,
        response: &str,
        gold: &[String],
        lexicon: &UnknownLexicon,
        split: &SplitSpec,
    ) -> Result<Self> {
        let membership = split
            .membership(question_id)
            .ok_or_else(|| Error::invalid(format!("question {question_id} is not in the split")))?;
        Ok(Self {
            question_id: question_id.to_owned(),
            response: response.to_owned(),
            classification: classify_response(response, gold, lexicon),
            membership,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CellCounts {
    pub correct: u64,
    pub unknown: u64,
    pub wrong: u64,
}

impl CellCounts {
    pub fn total(&self) -> u64 {
        self.correct + self.unknown + self.wrong
    }

    fn add(&mut self, c: Classification) {
        match c {
            Classification::Correct => self.correct += 1,
            Classification::UnknownExpr => self.unknown += 1,
            Classification::Wrong => self.wrong += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AwarenessReport {
    pub k_aware: f64,
    pub u_aware: f64,
    pub s_aware: f64,
    /// Share of questions whose three prompt variants agree, when measured.
    pub consistency: Option<f64>,
    pub t_k: CellCounts,
    pub t_unk: CellCounts,
}

impl AwarenessReport {
    pub fn from_counts(t_k: CellCounts, t_unk: CellCounts) -> Result<Self> {
        if t_k.total() == 0 {
            return Err(Error::UndefinedMetric("no outcomes on t_k".into()));
        }
        if t_unk.total() == 0 {
            return Err(Error::UndefinedMetric("no outcomes on t_unk".into()));
        }
        let k = Ratio::new(t_k.correct, t_k.total());
        let u = Ratio::new(t_unk.correct + t_unk.unknown, t_unk.total());
        let (k_aware, u_aware) = (k.percent(), u.percent());
        Ok(Self {
            k_aware,
            u_aware,
            s_aware: (k_aware + u_aware) / 2.0,
            consistency: None,
            t_k,
            t_unk,
        })
    }

    pub fn k_ratio(&self) -> Ratio {
        Ratio::new(self.t_k.correct, self.t_k.total())
    }

    pub fn u_ratio(&self) -> Ratio {
        Ratio::new(self.t_unk.correct + self.t_unk.unknown, self.t_unk.total())
    }

    /// `s_aware` in tenths of a percent, rounded half-up from the exact
    /// count ratio.
    pub fn s_tenths(&self) -> u64 {
        let (k, u) = (self.k_ratio(), self.u_ratio());
        let num = k.num as u128 * u.den as u128 + u.num as u128 * k.den as u128;
        let den = 2 * k.den as u128 * u.den as u128;
        half_up_tenths(num, den)
    }

    /// Integer comparison key for `s_aware`: proportional to it for a fixed
    /// pair of cell totals.
    pub(crate) fn s_key(k: Ratio, u: Ratio) -> u128 {
        k.num as u128 * u.den as u128 + u.num as u128 * k.den as u128
    }

    pub fn rounded(&self) -> RoundedReport {
        RoundedReport {
            k_aware: self.k_ratio().percent_rounded(),
            u_aware: self.u_ratio().percent_rounded(),
            s_aware: self.s_tenths() as f64 / 10.0,
            consistency: self.consistency.map(round_half_up_1),
            t_k: self.t_k,
            t_unk: self.t_unk,
        }
    }
}

/// One-decimal half-up rounding for values that are not count ratios.
pub fn round_half_up_1(x: f64) -> f64 {
    ((x * 10.0) + 0.5 + 1e-9).floor() / 10.0
}

/// Serialized form of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundedReport {
    pub k_aware: f64,
    pub u_aware: f64,
    pub s_aware: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub consistency: Option<f64>,
    pub t_k: CellCounts,
    pub t_unk: CellCounts,
}

pub fn compute_report(outcomes: &[EvalOutcome], split: &SplitSpec) -> Result<AwarenessReport> {
    let mut seen = HashSet::new();
    let mut t_k = CellCounts::default();
    let mut t_unk = CellCounts::default();
    for o in outcomes {
        if !seen.insert(o.question_id.as_str()) {
            return Err(Error::invalid(format!("duplicate outcome for {}", o.question_id)));
        }
        match split.membership(&o.question_id) {
            Some(Membership::Known) => t_k.add(o.classification),
            Some(Membership::Unknown) => t_unk.add(o.classification),
            None => {
                return Err(Error::invalid(format!(
                    "outcome for {} is not in the split",
                    o.question_id
                )))
            }
        }
    }
    AwarenessReport::from_counts(t_k, t_unk)
}

/// Renders report rows in a fixed-width table: method, K, U, S and,
/// when present, consistency.
pub fn format_table(rows: &[(String, &AwarenessReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let with_con = rows.iter().any(|(_, r)| r.consistency.is_some());
    let mut out = format!("{:<width$}  {:>7}  {:>7}  {:>7}", "Method", "K_aware", "U_aware", "S_aware");
    if with_con {
        out.push_str(&format!("  {:>6}", "Con."));
    }
    out.push('\n');
    for (name, report) in rows {
        let r = report.rounded();
        out.push_str(&format!(
            "{:<width$}  {:>7.1}  {:>7.1}  {:>7.1}",
            name, r.k_aware, r.u_aware, r.s_aware
        ));
        if with_con {
            match r.consistency {
                Some(c) => out.push_str(&format!("  {:>6.1}", c)),
                None => out.push_str(&format!("  {:>6}", "-")),
            }
        }
        out.push('\n');
    }
    out
}

/// What a response says about whether the model knows the answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stance {
    Knows,
    DoesNotKnow,
    Unclear,
}

/// Maps prior, direct and posterior responses to stances.
#[derive(Debug, Clone)]
pub struct StanceReader {
    prior_yes: Vec<String>,
    prior_no: Vec<String>,
    posterior_sure: Vec<String>,
    posterior_unsure: Vec<String>,
    lexicon: UnknownLexicon,
}

impl StanceReader {
    pub fn new(templates: &TemplateSet, lexicon: UnknownLexicon) -> Self {
        let norm = |s: &str| vec![normalize(s)];
        let mut posterior_unsure = norm(&templates.posterior.target_unknown_pattern);
        posterior_unsure.push("not sure".into());
        Self {
            prior_yes: norm(&templates.prior.target_known_pattern),
            prior_no: norm(&templates.prior.target_unknown_pattern),
            posterior_sure: norm(&templates.posterior.target_known_pattern),
            posterior_unsure,
            lexicon,
        }
    }

    pub fn stance(&self, kind: AwarenessKind, response: &str) -> Stance {
        let n = normalize(response);
        let pick = |yes: &[String], no: &[String]| {
            // "unsure" must be tested before "sure"-style prefixes.
            if starts_with_any(&n, no) {
                Stance::DoesNotKnow
            } else if starts_with_any(&n, yes) {
                Stance::Knows
            } else {
                Stance::Unclear
            }
        };
        match kind {
            AwarenessKind::Prior => pick(&self.prior_yes, &self.prior_no),
            AwarenessKind::Posterior => pick(&self.posterior_sure, &self.posterior_unsure),
            AwarenessKind::Direct => {
                if n.is_empty() {
                    Stance::Unclear
                } else if self.lexicon.matches(response) {
                    Stance::DoesNotKnow
                } else {
                    Stance::Knows
                }
            }
        }
    }

    pub fn is_consistent(&self, prior: &str, direct: &str, posterior: &str) -> bool {
        let a = self.stance(AwarenessKind::Prior, prior);
        a != Stance::Unclear
            && a == self.stance(AwarenessKind::Direct, direct)
            && a == self.stance(AwarenessKind::Posterior, posterior)
    }
}

impl Default for StanceReader {
    fn default() -> Self {
        Self::new(&TemplateSet::default(), UnknownLexicon::default())
    }
}

/// One response to one awareness prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AwarenessResponse {
    pub question_id: String,
    pub kind: AwarenessKind,
    pub response: String,
}

/// Percentage of questions whose prior, direct and posterior responses
/// encode the same stance.
pub fn consistency_rate(responses: &[AwarenessResponse], reader: &StanceReader) -> Result<f64> {
    let mut by_question: HashMap<&str, [Option<&str>; 3]> = HashMap::new();
    for r in responses {
        let slot = &mut by_question.entry(r.question_id.as_str()).or_default()[r.kind.index()];
        if slot.is_some() {
            return Err(Error::invalid(format!(
                "duplicate {} response for {}",
                r.kind, r.question_id
            )));
        }
        *slot = Some(r.response.as_str());
    }
    if by_question.is_empty() {
        return Err(Error::invalid("no responses"));
    }
    let mut consistent = 0usize;
    for (id, slots) in &by_question {
        let [Some(prior), Some(direct), Some(posterior)] = slots else {
            return Err(Error::invalid(format!("question {id} is missing a prompt variant")));
        };
        if reader.is_consistent(prior, direct, posterior) {
            consistent += 1;
        }
    }
    Ok(100.0 * consistent as f64 / by_question.len() as f64)
}

/// How evaluated responses are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// The reference greedy answers, unfiltered.
    Raw,
    /// Awareness prompts sent to a (trained) model.
    Coke,
    Prior,
    Posterior,
    IcIdk,
    Verb,
}

impl EvalMode {
    pub const ALL: [EvalMode; 6] = [
        EvalMode::Raw,
        EvalMode::Coke,
        EvalMode::Prior,
        EvalMode::Posterior,
        EvalMode::IcIdk,
        EvalMode::Verb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Raw => "raw",
            EvalMode::Coke => "coke",
            EvalMode::Prior => "prior",
            EvalMode::Posterior => "posterior",
            EvalMode::IcIdk => "ic-idk",
            EvalMode::Verb => "verb",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown eval mode `{s}`")))
    }
}

/// Scores the reference model's own greedy answers.
pub fn raw_outcomes(
    results: &[ProbeResult],
    questions: &[QuestionRecord],
    split: &SplitSpec,
    lexicon: &UnknownLexicon,
) -> Result<Vec<EvalOutcome>> {
    let gold = gold_index(questions);
    results
        .iter()
        .map(|r| {
            let g = gold.get(r.question_id.as_str()).copied().unwrap_or(&[]);
            EvalOutcome::classify(&r.question_id, &r.prediction, g, lexicon, split)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    /// Hand-computed normalization and classification cases.
    #[test]
    fn normalization_table() {
        let lex = UnknownLexicon::default();
        let cases: [(&str, &[&str], Classification); 20] = [
            ("China", &["China"], Classification::Correct),
            ("unknown.", &["China"], Classification::UnknownExpr),
            ("The China ", &["china"], Classification::Correct),
            ("  china!!", &["China"], Classification::Correct),
            ("A  Tale of Two   Cities", &["tale of two cities"], Classification::Correct),
            ("an apple", &["Apple"], Classification::Correct),
            ("the the beatles", &["Beatles"], Classification::Correct),
            ("Beatles", &["The Beatles"], Classification::Correct),
            ("Unknown", &[], Classification::UnknownExpr),
            ("Unknow", &["x"], Classification::UnknownExpr),
            ("I don't know.", &["x"], Classification::UnknownExpr),
            ("i do not know the answer", &["x"], Classification::UnknownExpr),
            ("Unsure", &["x"], Classification::UnknownExpr),
            ("Unknowingly", &["unknowingly"], Classification::Correct),
            ("Japan", &["China"], Classification::Wrong),
            ("", &["China"], Classification::Wrong),
            ("China", &[], Classification::Wrong),
            ("St. Louis", &["st louis"], Classification::Correct),
            ("Washington, D.C.", &["Washington DC"], Classification::Correct),
            ("1,000", &["1000"], Classification::Correct),
        ];
        for (resp, gold, want) in cases {
            assert_eq!(classify_response(resp, &s(gold), &lex), want, "{resp:?} vs {gold:?}");
        }
    }

    #[test]
    fn normalize_is_idempotent() {
        for t in ["The  A an thing", "  Hello, World! ", "the", "An", "ÉCOLE normale"] {
            let once = normalize(t);
            assert_eq!(normalize(&once), once);
        }
    }

    #[test]
    fn ratio_rounding_is_half_up() {
        assert_eq!(Ratio::new(1, 8).percent_tenths(), 125); // 12.5 exactly
        assert_eq!(Ratio::new(1, 16).percent_tenths(), 63); // 6.25 -> 6.3
        assert_eq!(Ratio::new(1, 3).percent_tenths(), 333);
        assert_eq!(Ratio::new(2, 3).percent_tenths(), 667);
        assert_eq!(Ratio::new(0, 5).percent_tenths(), 0);
        assert_eq!(Ratio::new(5, 5).percent_tenths(), 1000);
    }

    fn counts(correct: u64, unknown: u64, wrong: u64) -> CellCounts {
        CellCounts { correct, unknown, wrong }
    }

    #[test]
    fn report_arithmetic() {
        let r = AwarenessReport::from_counts(counts(618, 0, 382), counts(0, 862, 138)).unwrap();
        assert_eq!(r.rounded().s_aware, 74.0);
        assert_eq!(r.s_aware, (r.k_aware + r.u_aware) / 2.0);

        let orig = AwarenessReport::from_counts(counts(10, 0, 0), counts(0, 0, 10)).unwrap();
        let o = orig.rounded();
        assert_eq!((o.k_aware, o.u_aware, o.s_aware), (100.0, 0.0, 50.0));
    }

    #[test]
    fn correct_answers_on_t_unk_count_as_aware() {
        let r = AwarenessReport::from_counts(counts(1, 0, 1), counts(1, 1, 2)).unwrap();
        assert_eq!(r.u_aware, 50.0);
    }

    #[test]
    fn empty_cells_are_undefined() {
        assert!(matches!(
            AwarenessReport::from_counts(counts(0, 0, 0), counts(1, 0, 0)),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            AwarenessReport::from_counts(counts(1, 0, 0), counts(0, 0, 0)),
            Err(Error::UndefinedMetric(_))
        ));
    }

    fn split(k: &[&str], u: &[&str]) -> SplitSpec {
        SplitSpec::new(
            k.iter().map(|x| x.to_string()).collect(),
            u.iter().map(|x| x.to_string()).collect(),
            "ref",
        )
        .unwrap()
    }

    #[test]
    fn compute_report_checks_ids() {
        let sp = split(&["a"], &["b"]);
        let o = |id: &str, c| EvalOutcome {
            question_id: id.into(),
            response: String::new(),
            classification: c,
            membership: Membership::Known,
        };
        assert!(compute_report(&[o("zz", Classification::Correct)], &sp).is_err());
        assert!(compute_report(&[o("a", Classification::Correct), o("a", Classification::Correct)], &sp).is_err());
        let r = compute_report(&[o("a", Classification::Correct), o("b", Classification::Wrong)], &sp).unwrap();
        assert_eq!((r.k_aware, r.u_aware), (100.0, 0.0));
    }

    #[test]
    fn split_accuracy() {
        let k: BTreeSet<String> = (0..904).map(|i| format!("k{i}")).collect();
        let u: BTreeSet<String> = (0..1096).map(|i| format!("u{i}")).collect();
        let sp = SplitSpec::new(k, u, "ref").unwrap();
        assert_eq!(sp.accuracy_ratio().percent_rounded(), 45.2);
        sp.verify().unwrap();
        let json = serde_json::to_string(&sp).unwrap();
        let back: SplitSpec = serde_json::from_str(&json).unwrap();
        back.verify().unwrap();
        assert_eq!(back.accuracy, sp.accuracy);
    }

    #[test]
    fn stances() {
        let r = StanceReader::default();
        assert!(r.is_consistent("Yes", "China", "Sure"));
        assert!(!r.is_consistent("Yes", "Unknown", "Sure"));
        assert!(r.is_consistent("No.", "Unknown", "Unsure"));
        assert!(!r.is_consistent("Maybe", "China", "Sure"));
        assert_eq!(r.stance(AwarenessKind::Posterior, "I am not sure"), Stance::Unclear);
        assert_eq!(r.stance(AwarenessKind::Posterior, "not sure at all"), Stance::DoesNotKnow);
    }

    #[test]
    fn consistency_rate_requires_all_variants() {
        let r = StanceReader::default();
        let resp = |id: &str, kind, text: &str| AwarenessResponse {
            question_id: id.into(),
            kind,
            response: text.into(),
        };
        let full = vec![
            resp("a", AwarenessKind::Prior, "Yes"),
            resp("a", AwarenessKind::Direct, "Paris"),
            resp("a", AwarenessKind::Posterior, "Sure"),
            resp("b", AwarenessKind::Prior, "Yes"),
            resp("b", AwarenessKind::Direct, "Unknown"),
            resp("b", AwarenessKind::Posterior, "Sure"),
        ];
        assert_eq!(consistency_rate(&full, &r).unwrap(), 50.0);
        assert_eq!(consistency_rate(&full[..3], &r).unwrap(), 100.0);
        assert!(consistency_rate(&full[..5], &r).is_err());
    }

    #[test]
    fn table_layout() {
        let r = AwarenessReport::from_counts(counts(3, 0, 1), counts(0, 1, 1)).unwrap();
        let t = format_table(&[("Min-Prob".into(), &r)]);
        assert!(t.starts_with("Method"));
        assert!(t.contains("75.0") && t.contains("50.0") && t.contains("62.5"));
    }
}
