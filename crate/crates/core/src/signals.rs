//! Scalar confidence signals derived from the per-token probabilities of a
//! greedy prediction.
//!
//! Three signals are supported:
//!
//! | signal      | value                              |
//! |-------------|------------------------------------|
//! | `min-prob`  | smallest token probability         |
//! | `fst-prob`  | probability of the first token     |
//! | `prod-prob` | product of all token probabilities |
//!
//! No length normalization is applied to `prod-prob`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-token probabilities of one model prediction, together with the
/// token strings they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTokenProbs")]
pub struct TokenProbSequence {
    probs: Vec<f64>,
    tokens: Vec<String>,
}

#[derive(Deserialize)]
struct RawTokenProbs {
    probs: Vec<f64>,
    tokens: Vec<String>,
}

impl TryFrom<RawTokenProbs> for TokenProbSequence {
    type Error = Error;

    fn try_from(raw: RawTokenProbs) -> Result<Self> {
        TokenProbSequence::new(raw.probs, raw.tokens)
    }
}

impl TokenProbSequence {
    pub fn new(probs: Vec<f64>, tokens: Vec<String>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("token probability sequence is empty"));
        }
        if probs.len() != tokens.len() {
            return Err(Error::invalid(format!(
                "{} probabilities for {} tokens",
                probs.len(),
                tokens.len()
            )));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(**p > 0.0 && **p <= 1.0))
        {
            return Err(Error::invalid(format!(
                "token {i} has probability {p}, expected a value in (0, 1]"
            )));
        }
        Ok(Self { probs, tokens })
    }

    /// Builds a sequence whose tokens are unnamed, for callers that only
    /// care about the numbers.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        let tokens = (0..probs.len()).map(|i| format!("<{i}>")).collect();
        Self::new(probs, tokens)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Concatenation of the token strings.
    pub fn text(&self) -> String {
        self.tokens.concat()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SignalKind {
    #[serde(rename = "min-prob")]
    MinProb,
    #[serde(rename = "fst-prob")]
    FstProb,
    #[serde(rename = "prod-prob")]
    ProdProb,
}

impl SignalKind {
    pub const ALL: [SignalKind; 3] = [SignalKind::MinProb, SignalKind::FstProb, SignalKind::ProdProb];

    pub fn as_str(self) -> &'static str {
        match self {
            SignalKind::MinProb => "min-prob",
            SignalKind::FstProb => "fst-prob",
            SignalKind::ProdProb => "prod-prob",
        }
    }
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SignalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SignalKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown signal `{s}`, expected one of min-prob, fst-prob, prod-prob"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceScore {
    pub value: f64,
    pub kind: SignalKind,
}

/// All three signals for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalSet {
    #[serde(rename = "min-prob")]
    pub min_prob: f64,
    #[serde(rename = "fst-prob")]
    pub fst_prob: f64,
    #[serde(rename = "prod-prob")]
    pub prod_prob: f64,
}

impl SignalSet {
    pub fn get(&self, kind: SignalKind) -> ConfidenceScore {
        let value = match kind {
            SignalKind::MinProb => self.min_prob,
            SignalKind::FstProb => self.fst_prob,
            SignalKind::ProdProb => self.prod_prob,
        };
        ConfidenceScore { value, kind }
    }

    pub fn iter(&self) -> impl Iterator<Item = ConfidenceScore> + '_ {
        SignalKind::ALL.into_iter().map(|k| self.get(k))
    }
}

pub fn compute_signal(seq: &TokenProbSequence, kind: SignalKind) -> ConfidenceScore {
    let probs = seq.probs();
    let value = match kind {
        SignalKind::MinProb => probs.iter().copied().fold(f64::INFINITY, f64::min),
        SignalKind::FstProb => probs[0],
        // A running product of values in (0, 1] is non-increasing, so no
        // intermediate can underflow before the result itself does.
        SignalKind::ProdProb => probs.iter().product(),
    };
    ConfidenceScore { value, kind }
}

pub fn compute_all_signals(seq: &TokenProbSequence) -> SignalSet {
    SignalSet {
        min_prob: compute_signal(seq, SignalKind::MinProb).value,
        fst_prob: compute_signal(seq, SignalKind::FstProb).value,
        prod_prob: compute_signal(seq, SignalKind::ProdProb).value,
    }
}

/// Validates raw probabilities and computes one signal in a single call.
pub fn signal_from_probs(probs: &[f64], kind: SignalKind) -> Result<ConfidenceScore> {
    let seq = TokenProbSequence::from_probs(probs.to_vec())?;
    Ok(compute_signal(&seq, kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOL: f64 = 1e-12;

    fn seq(probs: &[f64]) -> TokenProbSequence {
        TokenProbSequence::from_probs(probs.to_vec()).unwrap()
    }

    #[test]
    fn worked_examples() {
        let s = seq(&[0.9, 0.5, 0.7]);
        assert!((compute_signal(&s, SignalKind::MinProb).value - 0.5).abs() < TOL);
        assert!((compute_signal(&s, SignalKind::FstProb).value - 0.9).abs() < TOL);
        assert!((compute_signal(&s, SignalKind::ProdProb).value - 0.315).abs() < TOL);

        for kind in SignalKind::ALL {
            assert_eq!(compute_signal(&seq(&[1.0]), kind).value, 1.0);
        }
    }

    #[test]
    fn all_signals_examples() {
        let all = compute_all_signals(&seq(&[0.5, 0.5]));
        assert_eq!(all.min_prob, 0.5);
        assert_eq!(all.fst_prob, 0.5);
        assert!((all.prod_prob - 0.25).abs() < TOL);

        let ones = compute_all_signals(&seq(&[1.0, 1.0, 1.0]));
        assert!(ones.iter().all(|c| c.value == 1.0));
    }

    #[test]
    fn single_token_signals_are_equal() {
        let all = compute_all_signals(&seq(&[0.37]));
        assert_eq!(all.min_prob, all.fst_prob);
        assert_eq!(all.min_prob, all.prod_prob);
    }

    #[test]
    fn rejects_bad_sequences() {
        assert!(TokenProbSequence::from_probs(vec![]).is_err());
        assert!(TokenProbSequence::from_probs(vec![0.5, 0.0]).is_err());
        assert!(TokenProbSequence::from_probs(vec![1.2]).is_err());
        assert!(TokenProbSequence::from_probs(vec![f64::NAN]).is_err());
        assert!(TokenProbSequence::new(vec![0.5], vec![]).is_err());
        assert!(signal_from_probs(&[-0.1], SignalKind::MinProb).is_err());
    }

    #[test]
    fn deserialization_validates() {
        let bad = r#"{"probs":[0.5,2.0],"tokens":["a","b"]}"#;
        assert!(serde_json::from_str::<TokenProbSequence>(bad).is_err());
        let good = r#"{"probs":[0.5,1.0],"tokens":["a","b"]}"#;
        assert_eq!(serde_json::from_str::<TokenProbSequence>(good).unwrap().len(), 2);
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in SignalKind::ALL {
            assert_eq!(kind.as_str().parse::<SignalKind>().unwrap(), kind);
            assert_eq!(serde_json::to_string(&kind).unwrap(), format!("\"{kind}\""));
        }
        assert!("max-prob".parse::<SignalKind>().is_err());
    }

    #[test]
    fn first_token_signal_is_order_sensitive() {
        let a = compute_all_signals(&seq(&[0.9, 0.4]));
        let b = compute_all_signals(&seq(&[0.4, 0.9]));
        assert_ne!(a.fst_prob, b.fst_prob);
        assert_eq!(a.min_prob, b.min_prob);
        assert_eq!(a.prod_prob, b.prod_prob);
    }

    fn probs_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-6f64..=1.0, 1..=20)
    }

    proptest! {
        #[test]
        fn all_signals_match_per_kind(probs in probs_strategy()) {
            let s = seq(&probs);
            let all = compute_all_signals(&s);
            for kind in SignalKind::ALL {
                prop_assert_eq!(all.get(kind), compute_signal(&s, kind));
            }
        }

        #[test]
        fn ordering_invariants(probs in probs_strategy()) {
            let all = compute_all_signals(&seq(&probs));
            prop_assert!(all.min_prob >= all.prod_prob);
            prop_assert!(all.fst_prob >= all.min_prob);
        }

        #[test]
        fn permutation_keeps_min_and_prod(mut probs in probs_strategy(), rot in 0usize..20) {
            let before = compute_all_signals(&seq(&probs));
            let n = probs.len();
            probs.rotate_left(rot % n);
            probs.reverse();
            let after = compute_all_signals(&seq(&probs));
            prop_assert_eq!(before.min_prob, after.min_prob);
            prop_assert!((before.prod_prob - after.prod_prob).abs() <= TOL);
        }

        #[test]
        fn appending_certain_token_changes_nothing(probs in probs_strategy()) {
            let before = compute_all_signals(&seq(&probs));
            let mut extended = probs.clone();
            extended.push(1.0);
            let after = compute_all_signals(&seq(&extended));
            prop_assert_eq!(before, after);
        }

        #[test]
        fn min_equals_prod_when_others_certain(p in 1e-6f64..=1.0, n in 0usize..10, pos in 0usize..10) {
            let mut probs = vec![1.0; n];
            probs.insert(pos.min(n), p);
            let all = compute_all_signals(&seq(&probs));
            prop_assert_eq!(all.min_prob, all.prod_prob);
        }
    }
}
