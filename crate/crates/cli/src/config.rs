//! Run settings: defaults, overlaid by a TOML file, overlaid by flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use kbound::dataset::ExportFormat;
use kbound::eval::{BaselinePrompts, UnknownLexicon};
use kbound::partition::ThresholdSpec;
use kbound::probe::EndpointConfig;
use kbound::prompts::TemplateSet;
use kbound::signals::SignalKind;
use kbound::toy_trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::backend::EndpointSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Probe cache; defaults to `cache.jsonl` inside `out_dir`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    /// Awareness template file; the built-in templates otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    pub endpoint: EndpointConfig,
    pub partition: PartitionSettings,
    pub dataset: DatasetSettings,
    pub toy: ToySettings,
    pub eval: EvalSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            cache: None,
            templates: None,
            endpoint: EndpointConfig::default(),
            partition: PartitionSettings::default(),
            dataset: DatasetSettings::default(),
            toy: ToySettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSettings {
    pub signal: SignalKind,
    pub unk_quantile: f64,
    pub k_quantile: f64,
    /// Absolute thresholds; both or neither.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_unk: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_k: Option<f64>,
}

impl Default for PartitionSettings {
    fn default() -> Self {
        let spec = ThresholdSpec::default();
        Self {
            signal: spec.signal_kind,
            unk_quantile: spec.unk_quantile,
            k_quantile: spec.k_quantile,
            delta_unk: None,
            delta_k: None,
        }
    }
}

impl PartitionSettings {
    /// The threshold spec to resolve against a probe run.
    pub fn spec(&self) -> ThresholdSpec {
        match (self.delta_unk, self.delta_k) {
            (Some(u), Some(k)) => ThresholdSpec {
                unk_quantile: self.unk_quantile,
                k_quantile: self.k_quantile,
                ..ThresholdSpec::absolute(u, k, self.signal)
            },
            _ => ThresholdSpec::quantiles(self.unk_quantile, self.k_quantile, self.signal),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSettings {
    pub format: ExportFormat,
    pub balance: bool,
}

impl Default for DatasetSettings {
    fn default() -> Self {
        Self {
            format: ExportFormat::Internal,
            balance: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySettings {
    pub init_scale: f64,
    pub train: TrainConfig,
}

impl Default for ToySettings {
    fn default() -> Self {
        Self {
            init_scale: 0.01,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub bins: usize,
    pub unknown_phrases: Vec<String>,
    pub baselines: BaselinePrompts,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            bins: 10,
            unknown_phrases: UnknownLexicon::default().phrases().to_vec(),
            baselines: BaselinePrompts::default(),
        }
    }
}

impl EvalSettings {
    pub fn lexicon(&self) -> UnknownLexicon {
        UnknownLexicon::new(&self.unknown_phrases)
    }
}

/// Values given on the command line. `None` leaves the file or default
/// value in place.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub signal: Option<SignalKind>,
    pub unk_quantile: Option<f64>,
    pub k_quantile: Option<f64>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub max_parallel: Option<usize>,
}

impl Settings {
    pub fn from_toml_str(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Defaults, then `file` if given, then `flags`.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> anyhow::Result<Self> {
        let mut s = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Self::from_toml_str(&text)
                    .map_err(|e| kbound::Error::Config(vec![format!("{}: {e}", path.display())]))?
            }
            None => Self::default(),
        };
        s.apply(flags);
        Ok(s)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.endpoint {
            self.endpoint.base_url = v.clone();
        }
        if let Some(v) = &o.model {
            self.endpoint.model = v.clone();
        }
        if let Some(v) = o.signal {
            self.partition.signal = v;
        }
        if let Some(v) = o.unk_quantile {
            self.partition.unk_quantile = v;
        }
        if let Some(v) = o.k_quantile {
            self.partition.k_quantile = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out_dir {
            self.out_dir = v.clone();
        }
        if let Some(v) = o.max_parallel {
            self.endpoint.max_parallel = v;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# unprintable settings: {e}\n"))
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache.clone().unwrap_or_else(|| self.out_dir.join("cache.jsonl"))
    }

    pub fn template_set(&self) -> kbound::Result<TemplateSet> {
        match &self.templates {
            Some(p) => TemplateSet::load(p),
            None => Ok(TemplateSet::default()),
        }
    }

    /// Every problem with the settings, for a run that does or does not
    /// talk to an endpoint.
    pub fn violations(&self, uses_endpoint: bool) -> Vec<String> {
        let mut v = Vec::new();
        let spec = self.partition.spec();
        v.extend(spec.violations().into_iter().map(|m| format!("partition: {m}")));
        if self.partition.delta_unk.is_some() != self.partition.delta_k.is_some() {
            v.push("partition: delta_unk and delta_k must be given together".to_owned());
        }
        v.extend(self.toy.train.violations().into_iter().map(|m| format!("toy.train: {m}")));
        if !(self.toy.init_scale.is_finite() && self.toy.init_scale >= 0.0) {
            v.push("toy.init_scale must be finite and non-negative".to_owned());
        }
        if self.eval.bins < 2 {
            v.push("eval.bins must be at least 2".to_owned());
        }
        if self.eval.unknown_phrases.iter().all(|p| p.trim().is_empty()) {
            v.push("eval.unknown_phrases must contain a phrase".to_owned());
        }
        if let Some(p) = &self.templates {
            if let Err(e) = TemplateSet::load(p) {
                v.push(format!("templates: {e}"));
            }
        }
        if uses_endpoint {
            match EndpointSpec::parse(&self.endpoint.base_url) {
                Ok(EndpointSpec::Http) => v.extend(self.endpoint.violations()),
                Ok(EndpointSpec::Synthetic { .. }) => v.extend(
                    self.endpoint
                        .violations()
                        .into_iter()
                        .filter(|m| !m.contains("model is empty")),
                ),
                Err(e) => v.push(format!("endpoint: {e}")),
            }
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beats_defaults() {
        let file = Settings::from_toml_str(
            "seed = 4\n[partition]\nunk_quantile = 0.05\nk_quantile = 0.3\n[endpoint]\nmodel = \"m\"\n",
        )
        .unwrap();
        assert_eq!(file.seed, 4);
        assert_eq!(file.partition.k_quantile, 0.3);
        assert_eq!(file.eval.bins, 10);

        let mut s = file.clone();
        s.apply(&Overrides {
            seed: Some(9),
            k_quantile: Some(0.25),
            ..Overrides::default()
        });
        assert_eq!(s.seed, 9);
        assert_eq!(s.partition.k_quantile, 0.25);
        assert_eq!(s.partition.unk_quantile, 0.05);
        assert_eq!(s.endpoint.model, "m");
    }

    #[test]
    fn every_violation_is_reported() {
        let mut s = Settings::default();
        s.partition.unk_quantile = 1.5;
        s.partition.delta_k = Some(0.9);
        s.eval.bins = 1;
        s.endpoint.max_parallel = 0;
        let v = s.violations(true);
        assert!(v.iter().any(|m| m.contains("unk_quantile")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("together")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("bins")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("max_parallel")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("model is empty")), "{v:?}");
    }

    #[test]
    fn synthetic_endpoints_need_no_model_name() {
        let mut s = Settings::default();
        s.endpoint.base_url = "synthetic://?seed=2&n=50".into();
        assert!(s.violations(true).is_empty());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Settings::from_toml_str("sed = 1\n").is_err());
    }

    #[test]
    fn printed_settings_parse_back() {
        let mut s = Settings::default();
        s.partition.delta_unk = Some(0.2);
        s.partition.delta_k = Some(0.8);
        let back = Settings::from_toml_str(&s.to_toml()).unwrap();
        assert_eq!(back, s);
    }
}
