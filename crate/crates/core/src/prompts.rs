//! The three awareness prompt families and their training targets.
//!
//! * prior: asks whether the model knows the answer before answering,
//! * direct: asks for the answer,
//! * posterior: asks whether a given answer is certain.
//!
//! Templates use two placeholders, `{question}` and `{answer}`. Substitution
//! is single pass, so placeholder-like text inside a question is copied
//! through untouched.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::Membership;

pub const QUESTION_SLOT: &str = "{question}";
pub const ANSWER_SLOT: &str = "{answer}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AwarenessKind {
    Prior,
    Direct,
    Posterior,
}

impl AwarenessKind {
    pub const ALL: [AwarenessKind; 3] = [AwarenessKind::Prior, AwarenessKind::Direct, AwarenessKind::Posterior];

    pub fn as_str(self) -> &'static str {
        match self {
            AwarenessKind::Prior => "prior",
            AwarenessKind::Direct => "direct",
            AwarenessKind::Posterior => "posterior",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AwarenessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AwarenessKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AwarenessKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown awareness kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: AwarenessKind,
    pub pattern: String,
    /// Target when the question is known. `{answer}` is replaced by the
    /// probe-time prediction.
    pub target_known_pattern: String,
    pub target_unknown_pattern: String,
}

impl PromptTemplate {
    pub fn new(
        kind: AwarenessKind,
        pattern: impl Into<String>,
        target_known_pattern: impl Into<String>,
        target_unknown_pattern: impl Into<String>,
    ) -> Result<Self> {
        let t = Self {
            kind,
            pattern: pattern.into(),
            target_known_pattern: target_known_pattern.into(),
            target_unknown_pattern: target_unknown_pattern.into(),
        };
        let problems = t.violations();
        if problems.is_empty() {
            Ok(t)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn default_for(kind: AwarenessKind) -> Self {
        match kind {
            AwarenessKind::Prior => Self {
                kind,
                pattern: "Do you know the answer to the question '{question}' honestly?".into(),
                target_known_pattern: "Yes".into(),
                target_unknown_pattern: "No".into(),
            },
            AwarenessKind::Direct => Self {
                kind,
                pattern: "Answer the question '{question}'".into(),
                target_known_pattern: ANSWER_SLOT.into(),
                target_unknown_pattern: "Unknown".into(),
            },
            AwarenessKind::Posterior => Self {
                kind,
                pattern: "Are you sure that the answer to the '{question}' is '{answer}'".into(),
                target_known_pattern: "Sure".into(),
                target_unknown_pattern: "Unsure".into(),
            },
        }
    }

    /// Every placeholder rule this template breaks.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let name = self.kind.as_str();
        if !self.pattern.contains(QUESTION_SLOT) {
            out.push(format!("{name} pattern must contain {QUESTION_SLOT}"));
        }
        let has_answer = self.pattern.contains(ANSWER_SLOT);
        match (self.kind, has_answer) {
            (AwarenessKind::Posterior, false) => {
                out.push(format!("{name} pattern must contain {ANSWER_SLOT}"))
            }
            (AwarenessKind::Prior | AwarenessKind::Direct, true) => {
                out.push(format!("{name} pattern must not contain {ANSWER_SLOT}"))
            }
            _ => {}
        }
        if self.target_known_pattern.trim().is_empty() {
            out.push(format!("{name} known target is empty"));
        }
        if self.target_unknown_pattern.trim().is_empty() {
            out.push(format!("{name} unknown target is empty"));
        }
        if self.target_unknown_pattern.contains(ANSWER_SLOT) {
            out.push(format!("{name} unknown target must not contain {ANSWER_SLOT}"));
        }
        out
    }

    pub fn render(&self, question: &str, answer: Option<&str>) -> Result<String> {
        render(self, question, answer)
    }

    pub fn target_for(&self, membership: Membership, prediction: &str) -> Result<String> {
        target_for(self, membership, prediction)
    }
}

pub fn render(template: &PromptTemplate, question: &str, answer: Option<&str>) -> Result<String> {
    match (template.kind, answer) {
        (AwarenessKind::Posterior, None) => {
            return Err(Error::invalid("posterior prompt requires an answer"))
        }
        (AwarenessKind::Prior | AwarenessKind::Direct, Some(_)) => {
            return Err(Error::invalid(format!(
                "{} prompt does not take an answer",
                template.kind
            )))
        }
        _ => {}
    }
    Ok(fill_slots(&template.pattern, question, answer.unwrap_or("")))
}

pub fn target_for(template: &PromptTemplate, membership: Membership, prediction: &str) -> Result<String> {
    match membership {
        Membership::Known => {
            if prediction.trim().is_empty() {
                return Err(Error::invalid("known question has an empty prediction"));
            }
            Ok(fill_slots(&template.target_known_pattern, "", prediction))
        }
        Membership::Unknown => Ok(template.target_unknown_pattern.clone()),
    }
}

/// Replaces `{question}` and `{answer}` in `pattern` in a single pass.
pub fn fill_slots(pattern: &str, question: &str, answer: &str) -> String {
    let mut out = String::with_capacity(pattern.len() + question.len() + answer.len());
    let mut rest = pattern;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix(QUESTION_SLOT) {
            out.push_str(question);
            rest = after;
        } else if let Some(after) = tail.strip_prefix(ANSWER_SLOT) {
            out.push_str(answer);
            rest = after;
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    out
}

/// A complete, versioned set of awareness templates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub version: u32,
    pub prior: PromptTemplate,
    pub direct: PromptTemplate,
    pub posterior: PromptTemplate,
}

#[derive(Deserialize)]
struct TemplateFile {
    version: u32,
    prior: Option<TemplateEntry>,
    direct: Option<TemplateEntry>,
    posterior: Option<TemplateEntry>,
}

#[derive(Deserialize)]
struct TemplateEntry {
    pattern: String,
    known: String,
    unknown: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            version: 1,
            prior: PromptTemplate::default_for(AwarenessKind::Prior),
            direct: PromptTemplate::default_for(AwarenessKind::Direct),
            posterior: PromptTemplate::default_for(AwarenessKind::Posterior),
        }
    }
}

impl TemplateSet {
    pub fn get(&self, kind: AwarenessKind) -> &PromptTemplate {
        match kind {
            AwarenessKind::Prior => &self.prior,
            AwarenessKind::Direct => &self.direct,
            AwarenessKind::Posterior => &self.posterior,
        }
    }

    /// Builds a set from individual templates, failing when a kind is
    /// missing or supplied twice.
    pub fn from_templates(version: u32, templates: impl IntoIterator<Item = PromptTemplate>) -> Result<Self> {
        let mut slots: [Option<PromptTemplate>; 3] = [None, None, None];
        let mut problems = Vec::new();
        for t in templates {
            problems.extend(t.violations());
            let i = t.kind.index();
            if slots[i].is_some() {
                problems.push(format!("duplicate {} template", t.kind));
            }
            slots[i] = Some(t);
        }
        for kind in AwarenessKind::ALL {
            if slots[kind.index()].is_none() {
                problems.push(format!("missing {kind} template"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let [prior, direct, posterior] = slots.map(Option::unwrap);
        Ok(Self {
            version,
            prior,
            direct,
            posterior,
        })
    }

    /// Parses the TOML template file format:
    ///
    /// ```toml
    /// version = 1
    /// [prior]
    /// pattern = "Do you know the answer to the question '{question}' honestly?"
    /// known = "Yes"
    /// unknown = "No"
    /// ```
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let file: TemplateFile =
            toml::from_str(s).map_err(|e| Error::Config(vec![format!("template file: {e}")]))?;
        let entries = [
            (AwarenessKind::Prior, file.prior),
            (AwarenessKind::Direct, file.direct),
            (AwarenessKind::Posterior, file.posterior),
        ];
        let mut templates = Vec::new();
        let mut problems = Vec::new();
        for (kind, entry) in entries {
            match entry {
                Some(e) => templates.push(PromptTemplate {
                    kind,
                    pattern: e.pattern,
                    target_known_pattern: e.known,
                    target_unknown_pattern: e.unknown,
                }),
                None => problems.push(format!("missing {kind} template")),
            }
        }
        match Self::from_templates(file.version, templates) {
            Ok(set) if problems.is_empty() => Ok(set),
            Ok(_) => Err(Error::Config(problems)),
            Err(Error::Config(more)) => {
                problems.extend(more.into_iter().filter(|m| !m.starts_with("missing")));
                Err(Error::Config(problems))
            }
            Err(e) => Err(e),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        let mut out = format!("version = {}\n", self.version);
        for kind in AwarenessKind::ALL {
            let t = self.get(kind);
            let mut table = toml::Table::new();
            table.insert("pattern".into(), t.pattern.clone().into());
            table.insert("known".into(), t.target_known_pattern.clone().into());
            table.insert("unknown".into(), t.target_unknown_pattern.clone().into());
            out.push_str(&format!("\n[{kind}]\n{table}"));
        }
        out
    }
}
