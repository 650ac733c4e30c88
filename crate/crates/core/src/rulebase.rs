//! Versioned rule store and the candidate pool built from it.
//!
//! A [`RuleBase`] holds the induced normal rules, operator-authored rules and
//! the perturbed action labels for one scene. Every mutation bumps `version`
//! by exactly one. [`build_candidate_pool`] expands the three lists into the
//! templated sentences that all health scoring runs against.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RULEBASE_SCHEMA: &str = "cerberus-rulebase/1";

/// Label list shipped with the crate: 339 atomic action labels.
pub const DEFAULT_PERTURBED_LABELS: &str = include_str!("../resources/perturbed_labels.txt");

const NORMAL_TEMPLATE_PREFIX: &str = "The normal scene depicts ";
const SCENE_TEMPLATE_PREFIX: &str = "The scene depicts ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleSource {
    Induced,
    Custom,
    F2cRefined,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub text: String,
    pub source: RuleSource,
    pub created_version: u64,
}

impl Rule {
    pub fn new(text: impl Into<String>, source: RuleSource, created_version: u64) -> Result<Self> {
        let text = text.into().trim().to_string();
        if text.is_empty() {
            return Err(Error::EmptyRuleText);
        }
        Ok(Self { text, source, created_version: created_version.max(1) })
    }
}

/// Which side of the health score a custom rule contributes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Anomaly,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// Number of top candidates aggregated into the health score.
    pub k: usize,
    pub tau1: f64,
    pub tau2: f64,
    pub epsilon_motion: f64,
    pub alpha_prompt: f64,
    /// Frames per offline description segment.
    pub segment_len: usize,
}

impl Default for Params {
    fn default() -> Self {
        Self { k: 5, tau1: 0.0, tau2: 0.0, epsilon_motion: 7e-4, alpha_prompt: 1.2e-3, segment_len: 8 }
    }
}

impl Params {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidParams("k must be >= 1".into()));
        }
        if self.segment_len < 1 {
            return Err(Error::InvalidParams("segment_len must be >= 1".into()));
        }
        if !(self.epsilon_motion >= 0.0 && self.epsilon_motion < self.alpha_prompt) {
            return Err(Error::BadThresholds { epsilon: self.epsilon_motion, alpha: self.alpha_prompt });
        }
        if !self.tau1.is_finite() || !self.tau2.is_finite() {
            return Err(Error::InvalidParams("thresholds must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleBase {
    pub version: u64,
    pub params: Params,
    pub normal_rules: Vec<Rule>,
    pub custom_anomaly_rules: Vec<Rule>,
    pub perturbed_labels: Vec<String>,
}

/// Lowercase and collapse whitespace; two rules are duplicates iff their
/// normalized texts are equal.
pub fn normalize_rule_text(text: &str) -> String {
    text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// Parse a label list: one label per line, `#` starts a comment, blank lines skipped.
pub fn parse_label_list(text: &str) -> Vec<String> {
    text.lines().map(|line| line.split('#').next().unwrap_or("").trim()).filter(|line| !line.is_empty()).map(str::to_string).collect()
}

pub fn load_label_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_label_list(&text))
}

pub fn default_perturbed_labels() -> Vec<String> {
    parse_label_list(DEFAULT_PERTURBED_LABELS)
}

impl RuleBase {
    /// A fresh rulebase at version 1.
    pub fn new(params: Params, normal_rules: Vec<Rule>, perturbed_labels: Vec<String>) -> Result<Self> {
        params.validate()?;
        let mut rb = Self { version: 1, params, normal_rules: Vec::new(), custom_anomaly_rules: Vec::new(), perturbed_labels };
        for rule in normal_rules {
            if !rb.contains_normalized(&rb.normal_rules, &rule.text) {
                rb.normal_rules.push(Rule { created_version: 1, ..rule });
            }
        }
        Ok(rb)
    }

    fn contains_normalized(&self, list: &[Rule], text: &str) -> bool {
        let needle = normalize_rule_text(text);
        list.iter().any(|r| normalize_rule_text(&r.text) == needle)
    }

    pub fn has_rule(&self, kind: RuleKind, text: &str) -> bool {
        match kind {
            RuleKind::Anomaly => self.contains_normalized(&self.custom_anomaly_rules, text),
            RuleKind::Normal => self.contains_normalized(&self.normal_rules, text),
        }
    }

    fn bump(&mut self) -> u64 {
        self.version += 1;
        self.version
    }

    /// Append an operator rule. Normal-kind rules join `normal_rules` with
    /// source `custom`; anomaly-kind rules join `custom_anomaly_rules`.
    pub fn add_custom_rule(&mut self, text: &str, kind: RuleKind) -> Result<()> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(Error::EmptyRuleText);
        }
        if self.has_rule(kind, trimmed) {
            return Err(Error::DuplicateRule(trimmed.to_string()));
        }
        let version = self.bump();
        let rule = Rule::new(trimmed, RuleSource::Custom, version)?;
        match kind {
            RuleKind::Anomaly => self.custom_anomaly_rules.push(rule),
            RuleKind::Normal => self.normal_rules.push(rule),
        }
        Ok(())
    }

    /// Merge a batch of normal rules under one version bump. Duplicates (of
    /// existing rules or within the batch) are skipped. Returns the number of
    /// rules actually added; the version is bumped even when that is zero.
    pub fn merge_normal_rules<I, S>(&mut self, texts: I, source: RuleSource) -> usize
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let version = self.bump();
        let mut added = 0;
        for text in texts {
            let text = text.as_ref().trim();
            if text.is_empty() || self.contains_normalized(&self.normal_rules, text) {
                continue;
            }
            self.normal_rules.push(Rule { text: text.to_string(), source, created_version: version });
            added += 1;
        }
        added
    }

    /// Replace thresholds; counts as a mutation.
    pub fn set_params(&mut self, params: Params) -> Result<()> {
        params.validate()?;
        self.params = params;
        self.bump();
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version < 1 {
            return Err(Error::InvalidParams("version must be >= 1".into()));
        }
        self.params.validate()?;
        for rule in self.normal_rules.iter().chain(&self.custom_anomaly_rules) {
            if rule.text.trim().is_empty() {
                return Err(Error::EmptyRuleText);
            }
            if rule.created_version < 1 {
                return Err(Error::InvalidParams(format!("rule {:?} has created_version 0", rule.text)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = RuleBaseFileRef { schema: RULEBASE_SCHEMA, rulebase: self };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let schema = value.get("schema").and_then(|s| s.as_str()).unwrap_or("");
        if schema != RULEBASE_SCHEMA {
            return Err(Error::SchemaVersionMismatch { expected: RULEBASE_SCHEMA.into(), found: schema.into() });
        }
        let file: RuleBaseFile = serde_json::from_value(value)?;
        file.rulebase.validate()?;
        Ok(file.rulebase)
    }
}

#[derive(Serialize)]
struct RuleBaseFileRef<'a> {
    schema: &'static str,
    #[serde(flatten)]
    rulebase: &'a RuleBase,
}

#[derive(Deserialize)]
struct RuleBaseFile {
    #[allow(dead_code)]
    schema: String,
    #[serde(flatten)]
    rulebase: RuleBase,
}

pub fn save_rulebase(rulebase: &RuleBase, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = rulebase.to_json()?;
    write_atomic(path, json.as_bytes())
}

pub fn load_rulebase(path: impl AsRef<Path>) -> Result<RuleBase> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RuleBase::from_json(&text)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateOrigin {
    NormalRule,
    CustomAnomaly,
    PerturbedLabel,
}

/// Weight of a candidate in the health score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i8")]
pub enum Polarity {
    Normal,
    Anomalous,
}

impl Polarity {
    pub fn weight(self) -> f64 {
        match self {
            Polarity::Normal => 1.0,
            Polarity::Anomalous => -1.0,
        }
    }
}

impl From<Polarity> for i8 {
    fn from(p: Polarity) -> i8 {
        match p {
            Polarity::Normal => 1,
            Polarity::Anomalous => -1,
        }
    }
}

impl TryFrom<i8> for Polarity {
    type Error = String;
    fn try_from(v: i8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Polarity::Normal),
            -1 => Ok(Polarity::Anomalous),
            other => Err(format!("polarity must be +1 or -1, got {other}")),
        }
    }
}

impl CandidateOrigin {
    pub fn polarity(self) -> Polarity {
        match self {
            CandidateOrigin::NormalRule => Polarity::Normal,
            CandidateOrigin::CustomAnomaly | CandidateOrigin::PerturbedLabel => Polarity::Anomalous,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: usize,
    pub text: String,
    pub polarity: Polarity,
    pub origin: CandidateOrigin,
}

/// Immutable snapshot of the templated candidates for one rulebase version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub candidates: Vec<Candidate>,
    pub rulebase_version: u64,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn texts(&self) -> Vec<String> {
        self.candidates.iter().map(|c| c.text.clone()).collect()
    }

    pub fn polarities(&self) -> Vec<Polarity> {
        self.candidates.iter().map(|c| c.polarity).collect()
    }

    pub fn is_current(&self, rulebase: &RuleBase) -> bool {
        self.rulebase_version == rulebase.version
    }
}

fn sentence(prefix: &str, body: &str) -> String {
    let body = body.trim().trim_end_matches('.');
    format!("{prefix}{body}.")
}

/// Expand the rulebase into its candidate pool. Ids are assigned in the order
/// normal rules, custom anomaly rules, perturbed labels.
pub fn build_candidate_pool(rulebase: &RuleBase) -> Result<CandidatePool> {
    if rulebase.perturbed_labels.is_empty() {
        return Err(Error::EmptyPerturbedSet);
    }
    let normal = rulebase.normal_rules.iter().map(|r| (sentence(NORMAL_TEMPLATE_PREFIX, &r.text), CandidateOrigin::NormalRule));
    let custom = rulebase.custom_anomaly_rules.iter().map(|r| (sentence(SCENE_TEMPLATE_PREFIX, &r.text), CandidateOrigin::CustomAnomaly));
    let perturbed = rulebase.perturbed_labels.iter().map(|l| (sentence(SCENE_TEMPLATE_PREFIX, l), CandidateOrigin::PerturbedLabel));

    let candidates = normal
        .chain(custom)
        .chain(perturbed)
        .enumerate()
        .map(|(id, (text, origin))| Candidate { id, text, polarity: origin.polarity(), origin })
        .collect();
    Ok(CandidatePool { candidates, rulebase_version: rulebase.version })
}

/// File-backed rulebase with serialized writers and snapshot readers.
///
/// Readers get an `Arc` to a complete version; writers run one at a time and
/// persist before publishing the new snapshot.
#[derive(Debug)]
pub struct RuleStore {
    path: Option<PathBuf>,
    current: RwLock<Arc<RuleBase>>,
    writer: Mutex<()>,
}

impl RuleStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let rb = load_rulebase(&path)?;
        Ok(Self { path: Some(path), current: RwLock::new(Arc::new(rb)), writer: Mutex::new(()) })
    }

    pub fn in_memory(rulebase: RuleBase) -> Self {
        Self { path: None, current: RwLock::new(Arc::new(rulebase)), writer: Mutex::new(()) }
    }

    pub fn snapshot(&self) -> Arc<RuleBase> {
        self.current.read().expect("rulebase lock poisoned").clone()
    }

    pub fn version(&self) -> u64 {
        self.snapshot().version
    }

    /// Apply `f` to a copy of the current rulebase and publish it. With
    /// `expected_version` set, the write is refused if another writer got
    /// there first.
    pub fn update<T>(&self, expected_version: Option<u64>, f: impl FnOnce(&mut RuleBase) -> Result<T>) -> Result<(T, Arc<RuleBase>)> {
        let _guard = self.writer.lock().expect("rulebase writer poisoned");
        let current = self.snapshot();
        if let Some(expected) = expected_version {
            if expected != current.version {
                return Err(Error::StaleVersion { expected, current: current.version });
            }
        }
        let mut next = (*current).clone();
        let out = f(&mut next)?;
        if next.version != current.version {
            if let Some(path) = &self.path {
                save_rulebase(&next, path)?;
            }
        }
        let next = Arc::new(next);
        *self.current.write().expect("rulebase lock poisoned") = next.clone();
        Ok((out, next))
    }

    /// Re-read the backing file, e.g. after an external CLI edit.
    pub fn reload(&self) -> Result<Arc<RuleBase>> {
        let Some(path) = &self.path else { return Ok(self.snapshot()) };
        let _guard = self.writer.lock().expect("rulebase writer poisoned");
        let rb = Arc::new(load_rulebase(path)?);
        *self.current.write().expect("rulebase lock poisoned") = rb.clone();
        Ok(rb)
    }
}
