use serde::{Deserialize, Serialize};

use super::SplitSpec;
use crate::error::{Error, Result};
use crate::partition::Membership;
use crate::probe::ProbeResult;
use crate::signals::SignalKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub correct: u64,
    pub incorrect: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub signal: SignalKind,
    pub bins: Vec<HistogramBin>,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,correct,incorrect\n");
        for b in &self.bins {
            out.push_str(&format!("{:.4},{:.4},{},{}\n", b.lo, b.hi, b.correct, b.incorrect));
        }
        out
    }

    /// Share of incorrect predictions among bins lying entirely below `c`.
    pub fn incorrect_share_below(&self, c: f64) -> Option<f64> {
        let (inc, tot) = self
            .bins
            .iter()
            .filter(|b| b.hi <= c + 1e-12)
            .fold((0, 0), |(i, t), b| (i + b.incorrect, t + b.correct + b.incorrect));
        (tot > 0).then(|| inc as f64 / tot as f64)
    }
}

/// Counts correct and incorrect reference predictions in equal-width
/// confidence bins over [0, 1]. The last bin is closed on the right.
pub fn confidence_histogram(
    results: &[ProbeResult],
    split: &SplitSpec,
    kind: SignalKind,
    bins: usize,
) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::invalid("histogram needs at least 2 bins"));
    }
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: i as f64 / bins as f64,
            hi: (i + 1) as f64 / bins as f64,
            correct: 0,
            incorrect: 0,
        })
        .collect();
    for r in results {
        let c = r.signals.get(kind).value;
        let i = ((c * bins as f64).floor() as usize).min(bins - 1);
        match split.membership(&r.question_id) {
            Some(Membership::Known) => out[i].correct += 1,
            Some(Membership::Unknown) => out[i].incorrect += 1,
            None => {
                return Err(Error::invalid(format!(
                    "{} is not in the split",
                    r.question_id
                )))
            }
        }
    }
    Ok(Histogram { signal: kind, bins: out })
}
