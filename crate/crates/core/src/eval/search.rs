//! Threshold search for confidence-based abstention.
//!
//! A prediction is withheld (treated as an unknown expression) when its
//! confidence is strictly below the threshold. The search scans one
//! representative per distinct abstention set: 0, the midpoints between
//! consecutive distinct confidences, and the next float above the maximum.
//! Ties in `s_aware` go to the higher threshold.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{
    classify_response, gold_index, AwarenessReport, CellCounts, Classification, EvalOutcome, Ratio, SplitSpec,
    UnknownLexicon,
};
use crate::error::{Error, Result};
use crate::partition::Membership;
use crate::probe::{ProbeResult, QuestionRecord};
use crate::signals::SignalKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdItem {
    pub confidence: f64,
    pub membership: Membership,
    /// Classification of the answer when it is not withheld.
    pub answered: Classification,
}

impl ThresholdItem {
    /// Classification at threshold `t`.
    pub fn at(&self, t: f64) -> Classification {
        if self.confidence < t {
            Classification::UnknownExpr
        } else {
            self.answered
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearch {
    pub threshold: f64,
    pub signal: Option<SignalKind>,
    /// Report on the items the threshold was fitted to.
    pub report: AwarenessReport,
}

/// Every threshold the search considers, ascending.
pub fn candidate_thresholds(confidences: &[f64]) -> Vec<f64> {
    let mut values: Vec<f64> = confidences.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let Some(&max) = values.last() else {
        return vec![0.0];
    };
    let mut out = Vec::with_capacity(values.len() + 1);
    out.push(values[0].min(0.0));
    out.extend(values.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(max.next_up());
    out
}

fn counts_at(items: &[ThresholdItem], t: f64) -> (CellCounts, CellCounts) {
    let mut k = CellCounts::default();
    let mut u = CellCounts::default();
    for item in items {
        let cell = match item.membership {
            Membership::Known => &mut k,
            Membership::Unknown => &mut u,
        };
        match item.at(t) {
            Classification::Correct => cell.correct += 1,
            Classification::UnknownExpr => cell.unknown += 1,
            Classification::Wrong => cell.wrong += 1,
        }
    }
    (k, u)
}

/// Finds the `s_aware`-maximizing threshold with a single sorted sweep.
pub fn search_threshold(items: &[ThresholdItem]) -> Result<ThresholdSearch> {
    let nk = items.iter().filter(|i| i.membership == Membership::Known).count() as u64;
    let nu = items.len() as u64 - nk;
    if nk == 0 || nu == 0 {
        return Err(Error::UndefinedMetric(
            "threshold search needs items on both t_k and t_unk".into(),
        ));
    }
    let mut sorted: Vec<&ThresholdItem> = items.iter().collect();
    sorted.sort_by(|a, b| a.confidence.total_cmp(&b.confidence));

    // Aware counts with nothing withheld.
    let mut k_aware = items
        .iter()
        .filter(|i| i.membership == Membership::Known && i.answered == Classification::Correct)
        .count() as u64;
    let mut u_aware = items
        .iter()
        .filter(|i| i.membership == Membership::Unknown && i.answered != Classification::Wrong)
        .count() as u64;
    let key = |k: u64, u: u64| AwarenessReport::s_key(Ratio::new(k, nk), Ratio::new(u, nu));

    let mut best_t = sorted[0].confidence.min(0.0);
    let mut best_key = key(k_aware, u_aware);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].confidence;
        while i < sorted.len() && sorted[i].confidence == v {
            let item = sorted[i];
            match (item.membership, item.answered) {
                (Membership::Known, Classification::Correct) => k_aware -= 1,
                (Membership::Unknown, Classification::Wrong) => u_aware += 1,
                _ => {}
            }
            i += 1;
        }
        let t = match sorted.get(i) {
            Some(next) => v + (next.confidence - v) / 2.0,
            None => v.next_up(),
        };
        let k = key(k_aware, u_aware);
        if k >= best_key {
            best_key = k;
            best_t = t;
        }
    }
    let (k, u) = counts_at(items, best_t);
    Ok(ThresholdSearch {
        threshold: best_t,
        signal: None,
        report: AwarenessReport::from_counts(k, u)?,
    })
}

fn items_from_results(
    results: &[ProbeResult],
    kind: SignalKind,
    gold: &HashMap<&str, &[String]>,
    split: &SplitSpec,
    lexicon: &UnknownLexicon,
) -> Result<Vec<ThresholdItem>> {
    results
        .iter()
        .map(|r| {
            let membership = split
                .membership(&r.question_id)
                .ok_or_else(|| Error::invalid(format!("{} is not in the split", r.question_id)))?;
            let g = gold.get(r.question_id.as_str()).copied().unwrap_or(&[]);
            Ok(ThresholdItem {
                confidence: r.signals.get(kind).value,
                membership,
                answered: classify_response(&r.prediction, g, lexicon),
            })
        })
        .collect()
}

/// Fits an abstention threshold for one confidence signal on labeled
/// training results.
pub fn uncertainty_baseline(
    results: &[ProbeResult],
    kind: SignalKind,
    labeled: &SplitSpec,
    questions: &[QuestionRecord],
    lexicon: &UnknownLexicon,
) -> Result<ThresholdSearch> {
    let gold = gold_index(questions);
    let items = items_from_results(results, kind, &gold, labeled, lexicon)?;
    let mut search = search_threshold(&items)?;
    search.signal = Some(kind);
    Ok(search)
}

/// Scores results with a fixed threshold.
pub fn apply_threshold(
    results: &[ProbeResult],
    kind: SignalKind,
    threshold: f64,
    questions: &[QuestionRecord],
    split: &SplitSpec,
    lexicon: &UnknownLexicon,
) -> Result<Vec<EvalOutcome>> {
    let gold = gold_index(questions);
    results
        .iter()
        .map(|r| {
            let membership = split
                .membership(&r.question_id)
                .ok_or_else(|| Error::invalid(format!("{} is not in the split", r.question_id)))?;
            let withheld = r.signals.get(kind).value < threshold;
            let g = gold.get(r.question_id.as_str()).copied().unwrap_or(&[]);
            Ok(EvalOutcome {
                question_id: r.question_id.clone(),
                response: if withheld { "Unknown".into() } else { r.prediction.clone() },
                classification: if withheld {
                    Classification::UnknownExpr
                } else {
                    classify_response(&r.prediction, g, lexicon)
                },
                membership,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn item(c: f64, known: bool, correct: bool) -> ThresholdItem {
        ThresholdItem {
            confidence: c,
            membership: if known { Membership::Known } else { Membership::Unknown },
            answered: if correct { Classification::Correct } else { Classification::Wrong },
        }
    }

    /// O(n^2) reference: score every candidate independently.
    fn brute_force(items: &[ThresholdItem]) -> (f64, u128) {
        let cs: Vec<f64> = items.iter().map(|i| i.confidence).collect();
        let mut best = (f64::NAN, 0u128);
        for t in candidate_thresholds(&cs) {
            let (k, u) = counts_at(items, t);
            let r = AwarenessReport::from_counts(k, u).unwrap();
            let key = AwarenessReport::s_key(r.k_ratio(), r.u_ratio());
            if best.0.is_nan() || key >= best.1 {
                best = (t, key);
            }
        }
        best
    }

    #[test]
    fn separable_sets_pick_gap_midpoint() {
        let items = vec![
            item(0.9, true, true),
            item(1.0, true, true),
            item(0.1, false, false),
            item(0.2, false, false),
        ];
        let s = search_threshold(&items).unwrap();
        assert!((s.threshold - 0.55).abs() < 1e-12);
        assert_eq!(s.report.rounded().s_aware, 100.0);
        assert_eq!(brute_force(&items).0, s.threshold);
    }

    #[test]
    fn extreme_thresholds() {
        let items = vec![item(0.9, true, true), item(0.3, false, false), item(0.6, false, false)];
        let (k, u) = counts_at(&items, 0.0);
        let raw = AwarenessReport::from_counts(k, u).unwrap();
        assert_eq!((raw.k_aware, raw.u_aware), (100.0, 0.0));
        let (k, u) = counts_at(&items, 0.9f64.next_up());
        let all = AwarenessReport::from_counts(k, u).unwrap();
        assert_eq!((all.k_aware, all.u_aware, all.s_aware), (0.0, 100.0, 50.0));
    }

    #[test]
    fn requires_both_cells() {
        assert!(search_threshold(&[item(0.5, true, true)]).is_err());
    }

    #[test]
    fn candidates_cover_sentinels() {
        let c = candidate_thresholds(&[0.5, 0.2, 0.5, 1.0]);
        assert_eq!(c.len(), 4);
        assert_eq!(c[0], 0.0);
        assert!((c[1] - 0.35).abs() < 1e-15);
        assert!((c[2] - 0.75).abs() < 1e-15);
        assert!(c[3] > 1.0);
    }

    proptest! {
        #[test]
        fn sweep_matches_brute_force(
            raw in prop::collection::vec((1u32..=40, any::<bool>(), any::<bool>()), 2..120)
        ) {
            let mut items: Vec<ThresholdItem> = raw
                .iter()
                .map(|(c, known, ok)| item(*c as f64 / 40.0, *known, *known && *ok))
                .collect();
            items[0].membership = Membership::Known;
            items[1].membership = Membership::Unknown;
            items[1].answered = Classification::Wrong;
            let s = search_threshold(&items).unwrap();
            let (t, key) = brute_force(&items);
            prop_assert_eq!(s.threshold, t);
            prop_assert_eq!(AwarenessReport::s_key(s.report.k_ratio(), s.report.u_ratio()), key);
        }

        #[test]
        fn more_abstention_never_raises_k(
            raw in prop::collection::vec((1u32..=40, any::<bool>(), any::<bool>()), 2..80),
            a in 0.0f64..1.1, b in 0.0f64..1.1
        ) {
            let items: Vec<ThresholdItem> = raw
                .iter()
                .map(|(c, known, ok)| item(*c as f64 / 40.0, *known, *ok))
                .collect();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (k_lo, u_lo) = counts_at(&items, lo);
            let (k_hi, u_hi) = counts_at(&items, hi);
            prop_assert!(k_hi.correct <= k_lo.correct);
            prop_assert!(u_hi.unknown >= u_lo.unknown);
        }
    }
}
