//! Splitting probed questions into a confidently-known set and a
//! confidently-unknown set.
//!
//! A question lands in the unknown set when its confidence is strictly below
//! `delta_unk` and in the known set when strictly above `delta_k`. Anything
//! in between, including values equal to either threshold, is dropped.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{file_sha256, read_json, read_jsonl, to_jsonl, write_json};
use crate::probe::ProbeResult;
use crate::signals::SignalKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Membership {
    #[serde(rename = "k")]
    Known,
    #[serde(rename = "unk")]
    Unknown,
}

impl Membership {
    pub fn as_str(self) -> &'static str {
        match self {
            Membership::Known => "k",
            Membership::Unknown => "unk",
        }
    }
}

impl fmt::Display for Membership {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    QuantileDerived,
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub delta_unk: f64,
    pub delta_k: f64,
    pub mode: ThresholdMode,
    /// Fraction taken from the bottom of the confidence distribution.
    pub unk_quantile: f64,
    /// Fraction taken from the top of the confidence distribution.
    pub k_quantile: f64,
    pub signal_kind: SignalKind,
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        Self {
            delta_unk: 0.0,
            delta_k: 1.0,
            mode: ThresholdMode::QuantileDerived,
            unk_quantile: 0.10,
            k_quantile: 0.20,
            signal_kind: SignalKind::MinProb,
        }
    }
}

impl ThresholdSpec {
    pub fn absolute(delta_unk: f64, delta_k: f64, signal_kind: SignalKind) -> Self {
        Self {
            delta_unk,
            delta_k,
            mode: ThresholdMode::Absolute,
            signal_kind,
            ..Self::default()
        }
    }

    pub fn quantiles(unk_quantile: f64, k_quantile: f64, signal_kind: SignalKind) -> Self {
        Self {
            unk_quantile,
            k_quantile,
            signal_kind,
            ..Self::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let open_unit = |q: f64| q > 0.0 && q < 1.0;
        if !open_unit(self.unk_quantile) {
            out.push(format!("unk_quantile {} must lie in (0, 1)", self.unk_quantile));
        }
        if !open_unit(self.k_quantile) {
            out.push(format!("k_quantile {} must lie in (0, 1)", self.k_quantile));
        }
        if self.unk_quantile + self.k_quantile > 1.0 {
            out.push("unk_quantile + k_quantile must not exceed 1".to_owned());
        }
        if self.mode == ThresholdMode::Absolute {
            for (name, v) in [("delta_unk", self.delta_unk), ("delta_k", self.delta_k)] {
                if !(0.0..=1.0).contains(&v) {
                    out.push(format!("{name} {v} must lie in [0, 1]"));
                }
            }
            if self.delta_unk > self.delta_k {
                out.push(format!(
                    "delta_unk {} exceeds delta_k {}",
                    self.delta_unk, self.delta_k
                ));
            }
        }
        out
    }
}

/// Nearest-rank empirical quantile of an ascending sample.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    // The small slack keeps q*n that should be integral (0.1 * 1000) from
    // rounding up past the intended rank.
    let rank = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

pub fn resolve_thresholds(results: &[ProbeResult], spec: &ThresholdSpec) -> Result<ThresholdSpec> {
    let values: Vec<f64> = results
        .iter()
        .map(|r| r.signals.get(spec.signal_kind).value)
        .collect();
    resolve_from_confidences(&values, spec)
}

pub fn resolve_from_confidences(confidences: &[f64], spec: &ThresholdSpec) -> Result<ThresholdSpec> {
    if confidences.is_empty() {
        return Err(Error::invalid("cannot resolve thresholds from an empty set"));
    }
    if spec.mode != ThresholdMode::QuantileDerived {
        return Err(Error::invalid("threshold spec is already absolute"));
    }
    let problems = spec.violations();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut sorted = confidences.to_vec();
    sorted.sort_by(f64::total_cmp);
    let delta_unk = nearest_rank(&sorted, spec.unk_quantile);
    let delta_k = nearest_rank(&sorted, 1.0 - spec.k_quantile);
    if delta_unk == delta_k {
        return Err(Error::DegenerateDistribution(format!(
            "{} quantile {} and {} quantile {} both resolve to {} over {} values (min {}, max {})",
            spec.signal_kind,
            spec.unk_quantile,
            spec.signal_kind,
            1.0 - spec.k_quantile,
            delta_unk,
            sorted.len(),
            sorted[0],
            sorted[sorted.len() - 1]
        )));
    }
    Ok(ThresholdSpec {
        delta_unk,
        delta_k,
        mode: ThresholdMode::Absolute,
        ..*spec
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionEntry {
    pub question_id: String,
    pub question: String,
    pub prediction: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedSet {
    pub d_k: Vec<PartitionEntry>,
    pub d_unk: Vec<PartitionEntry>,
    pub thresholds: ThresholdSpec,
    pub excluded_count: usize,
}

pub fn partition(results: &[ProbeResult], spec: &ThresholdSpec) -> Result<PartitionedSet> {
    if spec.mode != ThresholdMode::Absolute {
        return Err(Error::invalid(
            "partition needs absolute thresholds; resolve quantiles first",
        ));
    }
    let problems = spec.violations();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut seen = HashSet::new();
    let mut d_k = Vec::new();
    let mut d_unk = Vec::new();
    let mut excluded_count = 0;
    for r in results {
        if !seen.insert(r.question_id.as_str()) {
            return Err(Error::invalid(format!("duplicate question id {}", r.question_id)));
        }
        let confidence = r.signals.get(spec.signal_kind).value;
        let entry = PartitionEntry {
            question_id: r.question_id.clone(),
            question: r.question.clone(),
            prediction: r.prediction.clone(),
            confidence,
        };
        if confidence < spec.delta_unk {
            d_unk.push(entry);
        } else if confidence > spec.delta_k {
            d_k.push(entry);
        } else {
            excluded_count += 1;
        }
    }
    d_k.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    d_unk.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    Ok(PartitionedSet {
        d_k,
        d_unk,
        thresholds: *spec,
        excluded_count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PartitionLine {
    set: Membership,
    #[serde(flatten)]
    entry: PartitionEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionCounts {
    pub k: usize,
    pub unk: usize,
    pub excluded: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputChecksum {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub thresholds: ThresholdSpec,
    pub signal_kind: SignalKind,
    pub counts: PartitionCounts,
    pub inputs: Vec<InputChecksum>,
    pub partition_sha256: String,
}

impl PartitionedSet {
    pub fn len(&self) -> usize {
        self.d_k.len() + self.d_unk.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> PartitionCounts {
        PartitionCounts {
            k: self.d_k.len(),
            unk: self.d_unk.len(),
            excluded: self.excluded_count,
            total: self.len() + self.excluded_count,
        }
    }

    /// Entries tagged with their membership, unknown set first.
    pub fn entries(&self) -> impl Iterator<Item = (Membership, &PartitionEntry)> {
        self.d_unk
            .iter()
            .map(|e| (Membership::Unknown, e))
            .chain(self.d_k.iter().map(|e| (Membership::Known, e)))
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let lines: Vec<PartitionLine> = self
            .entries()
            .map(|(set, entry)| PartitionLine {
                set,
                entry: entry.clone(),
            })
            .collect();
        to_jsonl(&lines)
    }

    pub fn manifest(&self, inputs: Vec<InputChecksum>) -> Result<PartitionManifest> {
        Ok(PartitionManifest {
            thresholds: self.thresholds,
            signal_kind: self.thresholds.signal_kind,
            counts: self.counts(),
            inputs,
            partition_sha256: crate::io::sha256_hex(self.to_jsonl()?.as_bytes()),
        })
    }

    /// Writes `partition.jsonl` and `partition.manifest.json` into `dir`.
    pub fn save(&self, dir: &Path, inputs: &[&Path]) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        let data = dir.join("partition.jsonl");
        let manifest_path = dir.join("partition.manifest.json");
        std::fs::write(&data, self.to_jsonl()?).map_err(|e| Error::io(&data, e))?;
        let checksums = inputs
            .iter()
            .map(|p| {
                Ok(InputChecksum {
                    path: p.display().to_string(),
                    sha256: file_sha256(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_json(&manifest_path, &self.manifest(checksums)?)?;
        Ok((data, manifest_path))
    }

    pub fn load(data: &Path, manifest_path: &Path) -> Result<Self> {
        let manifest: PartitionManifest = read_json(manifest_path)?;
        let lines: Vec<PartitionLine> = read_jsonl(data)?;
        let mut set = PartitionedSet {
            d_k: Vec::new(),
            d_unk: Vec::new(),
            thresholds: manifest.thresholds,
            excluded_count: manifest.counts.excluded,
        };
        for line in lines {
            match line.set {
                Membership::Known => set.d_k.push(line.entry),
                Membership::Unknown => set.d_unk.push(line.entry),
            }
        }
        if set.counts() != manifest.counts {
            return Err(Error::invalid(format!(
                "{}: counts {:?} disagree with manifest {:?}",
                data.display(),
                set.counts(),
                manifest.counts
            )));
        }
        Ok(set)
    }

    /// Checks the set-definition invariants.
    pub fn verify(&self) -> Result<()> {
        let t = &self.thresholds;
        if let Some(e) = self.d_unk.iter().find(|e| !(e.confidence < t.delta_unk)) {
            return Err(Error::invalid(format!("{} in d_unk at {}", e.question_id, e.confidence)));
        }
        if let Some(e) = self.d_k.iter().find(|e| !(e.confidence > t.delta_k)) {
            return Err(Error::invalid(format!("{} in d_k at {}", e.question_id, e.confidence)));
        }
        let unk: HashSet<_> = self.d_unk.iter().map(|e| &e.question_id).collect();
        if let Some(e) = self.d_k.iter().find(|e| unk.contains(&e.question_id)) {
            return Err(Error::invalid(format!("{} in both sets", e.question_id)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::{compute_all_signals, TokenProbSequence};
    use proptest::prelude::*;

    pub(crate) fn result(id: &str, c: f64) -> ProbeResult {
        let seq = TokenProbSequence::new(vec![c], vec![format!("ans-{id}")]).unwrap();
        ProbeResult {
            question_id: id.into(),
            question: format!("question {id}"),
            prompt_text: format!("Answer the question 'question {id}'"),
            prediction: format!("ans-{id}"),
            signals: compute_all_signals(&seq),
            token_probs: seq,
            model_id: "m".into(),
            created_at: "2024-01-01T00:00:00Z".into(),
        }
    }

    fn results(cs: &[f64]) -> Vec<ProbeResult> {
        cs.iter()
            .enumerate()
            .map(|(i, c)| result(&format!("q{i:05}"), *c))
            .collect()
    }

    /// Sort, then slice at the nearest-rank positions.
    fn oracle_thresholds(cs: &[f64], qu: f64, qk: f64) -> (f64, f64) {
        let mut s = cs.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = s.len();
        let idx = |q: f64| {
            let mut r = 1;
            while (r as f64) < q * n as f64 - 1e-9 {
                r += 1;
            }
            r.min(n) - 1
        };
        (s[idx(qu)], s[idx(1.0 - qk)])
    }

    #[test]
    fn resolves_hundred_point_grid() {
        let cs: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        let spec = resolve_thresholds(&results(&cs), &ThresholdSpec::default()).unwrap();
        assert_eq!((spec.delta_unk, spec.delta_k), oracle_thresholds(&cs, 0.1, 0.2));
        assert_eq!(spec.delta_unk, 0.10);
        assert_eq!(spec.delta_k, 0.80);
        assert_eq!(spec.mode, ThresholdMode::Absolute);
    }

    #[test]
    fn constant_confidences_are_degenerate() {
        let err = resolve_thresholds(&results(&[0.7; 50]), &ThresholdSpec::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateDistribution(_)), "{err}");
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(
            resolve_thresholds(&[], &ThresholdSpec::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn bad_quantiles_are_config_errors() {
        let spec = ThresholdSpec::quantiles(0.7, 0.5, SignalKind::MinProb);
        assert!(matches!(
            resolve_from_confidences(&[0.1, 0.2], &spec),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn three_point_example() {
        let spec = ThresholdSpec::absolute(0.1, 0.9, SignalKind::MinProb);
        let p = partition(&results(&[0.05, 0.5, 0.95]), &spec).unwrap();
        assert_eq!(p.d_unk.len(), 1);
        assert_eq!(p.d_unk[0].confidence, 0.05);
        assert_eq!(p.d_k.len(), 1);
        assert_eq!(p.d_k[0].confidence, 0.95);
        assert_eq!(p.excluded_count, 1);
        p.verify().unwrap();
    }

    #[test]
    fn boundary_values_are_excluded() {
        let spec = ThresholdSpec::absolute(0.1, 0.9, SignalKind::MinProb);
        let p = partition(&results(&[0.1, 0.9]), &spec).unwrap();
        assert!(p.is_empty());
        assert_eq!(p.excluded_count, 2);
    }

    #[test]
    fn partition_requires_absolute_spec() {
        assert!(partition(&results(&[0.5]), &ThresholdSpec::default()).is_err());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let spec = ThresholdSpec::absolute(0.1, 0.9, SignalKind::MinProb);
        let rs = vec![result("a", 0.05), result("a", 0.95)];
        assert!(partition(&rs, &spec).is_err());
    }

    #[test]
    fn save_load_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cs: Vec<f64> = (0..200).map(|i| ((i * 37) % 200) as f64 / 200.0 + 0.001).collect();
        let rs = results(&cs);
        let spec = resolve_thresholds(&rs, &ThresholdSpec::default()).unwrap();
        let p = partition(&rs, &spec).unwrap();
        let (data, manifest) = p.save(dir.path(), &[]).unwrap();
        let first = std::fs::read(&data).unwrap();
        let first_manifest = std::fs::read(&manifest).unwrap();
        let loaded = PartitionedSet::load(&data, &manifest).unwrap();
        assert_eq!(loaded, p);
        let dir2 = tempfile::tempdir().unwrap();
        let (data2, manifest2) = loaded.save(dir2.path(), &[]).unwrap();
        assert_eq!(std::fs::read(data2).unwrap(), first);
        assert_eq!(std::fs::read(manifest2).unwrap(), first_manifest);
    }

    proptest! {
        #[test]
        fn counts_add_up(cs in prop::collection::vec(0.001f64..=1.0, 1..300), lo in 0.0f64..0.5, span in 0.0f64..0.5) {
            let spec = ThresholdSpec::absolute(lo, lo + span, SignalKind::MinProb);
            let p = partition(&results(&cs), &spec).unwrap();
            prop_assert_eq!(p.len() + p.excluded_count, cs.len());
            prop_assert!(p.verify().is_ok());
        }

        #[test]
        fn thresholds_are_monotone(cs in prop::collection::vec(0.001f64..=1.0, 1..200), a in 0.0f64..0.5, b in 0.0f64..0.5, k in 0.5f64..1.0) {
            let rs = results(&cs);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let low = partition(&rs, &ThresholdSpec::absolute(lo, k, SignalKind::MinProb)).unwrap();
            let high = partition(&rs, &ThresholdSpec::absolute(hi, k, SignalKind::MinProb)).unwrap();
            prop_assert!(high.d_unk.len() >= low.d_unk.len());
            let k_low = partition(&rs, &ThresholdSpec::absolute(0.0, k.min(0.99), SignalKind::MinProb)).unwrap();
            let k_high = partition(&rs, &ThresholdSpec::absolute(0.0, (k + 0.05).min(1.0), SignalKind::MinProb)).unwrap();
            prop_assert!(k_high.d_k.len() <= k_low.d_k.len());
        }

        #[test]
        fn permutation_invariant(cs in prop::collection::vec(0.001f64..=1.0, 2..200), seed in any::<u64>()) {
            let rs = results(&cs);
            let mut shuffled = rs.clone();
            let n = shuffled.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            let spec = ThresholdSpec::absolute(0.3, 0.7, SignalKind::MinProb);
            prop_assert_eq!(partition(&rs, &spec).unwrap(), partition(&shuffled, &spec).unwrap());
        }
    }
}
