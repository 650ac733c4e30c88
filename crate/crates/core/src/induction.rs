//! Offline rule induction: normal footage → segment descriptions → rules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backends::{caption_frame, complete_rules, Backends, Captioner, ImageInput, RuleGeneralizer, DESCRIBE_PROMPT, RULE_PROMPT};
use crate::error::{Error, Result};
use crate::frames::{FrameMeta, FrameStore};
use crate::par::ordered_map;
use crate::rulebase::{Params, Rule, RuleBase, RuleSource};

pub const DEFAULT_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub scene_id: String,
    pub frame_ids: Vec<String>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub segment: Segment,
    pub text: String,
    pub model_id: String,
}

#[derive(Debug)]
pub struct SegmentFailure {
    pub index: usize,
    pub error: Error,
}

#[derive(Debug, Default)]
pub struct Described {
    pub descriptions: Vec<Description>,
    pub failures: Vec<SegmentFailure>,
}

/// Fixed-length windows over each scene's frames, ordered by `seq`. Windows
/// never cross a scene; a trailing partial window is dropped.
pub fn extract_segments(frames: &[FrameMeta], segment_len: usize, stride: usize) -> Result<Vec<Segment>> {
    if segment_len < 1 || stride < 1 {
        return Err(Error::BadParams("segment_len and stride must be >= 1".into()));
    }
    if frames.is_empty() {
        return Err(Error::EmptyInput("no frames to segment"));
    }
    let mut scenes: BTreeMap<&str, Vec<&FrameMeta>> = BTreeMap::new();
    for f in frames {
        scenes.entry(f.scene.as_str()).or_default().push(f);
    }
    let mut out = Vec::new();
    for (scene, mut list) in scenes {
        list.sort_by_key(|f| f.seq);
        let mut start = 0;
        while start + segment_len <= list.len() {
            out.push(Segment {
                scene_id: scene.to_string(),
                frame_ids: list[start..start + segment_len].iter().map(|f| f.frame_id.clone()).collect(),
            });
            start += stride;
        }
    }
    Ok(out)
}

fn describe_one<C: Captioner + ?Sized>(segment: &Segment, store: &dyn FrameStore, captioner: &C) -> Result<String> {
    let ids: Vec<&String> = if captioner.supports_multi_image() {
        segment.frame_ids.iter().collect()
    } else {
        segment.frame_ids.get(segment.len() / 2).into_iter().collect()
    };
    let images = ids.iter().map(|id| store.load(id)).collect::<Result<Vec<_>>>()?;
    let inputs: Vec<ImageInput<'_>> = ids.iter().zip(&images).map(|(id, img)| ImageInput::new(id, img)).collect();
    caption_frame(captioner, &inputs, DESCRIBE_PROMPT)
}

/// Caption every segment with the description prompt. Individual failures
/// are collected; the call only fails when every segment failed.
pub fn describe_segments<C: Captioner + ?Sized>(
    segments: &[Segment],
    store: &dyn FrameStore,
    captioner: &C,
    max_in_flight: usize,
) -> Result<Described> {
    let results = ordered_map(segments, max_in_flight, |s| describe_one(s, store, captioner));
    let mut out = Described::default();
    for (index, (segment, result)) in segments.iter().zip(results).enumerate() {
        match result {
            Ok(text) => out.descriptions.push(Description { segment: segment.clone(), text, model_id: captioner.model_id().to_string() }),
            Err(error) => {
                tracing::warn!("segment {index} ({}) not described: {error}", segment.scene_id);
                out.failures.push(SegmentFailure { index, error });
            }
        }
    }
    if !segments.is_empty() && out.descriptions.is_empty() {
        let first = out.failures.first().map(|f| f.error.to_string()).unwrap_or_default();
        return Err(Error::BackendUnavailable(format!("all {} segments failed; first: {first}", segments.len())));
    }
    Ok(out)
}

fn strip_reasoning(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("<think>") {
        out.push_str(&rest[..start]);
        match rest[start..].find("</think>") {
            Some(end) => rest = &rest[start + end + "</think>".len()..],
            None => {
                rest = "";
                break;
            }
        }
    }
    out.push_str(rest);
    out
}

fn strip_bullet(line: &str) -> &str {
    let line = line.trim();
    for prefix in ["- ", "* ", "• ", "-", "*", "•"] {
        if let Some(rest) = line.strip_prefix(prefix) {
            return rest.trim();
        }
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return rest.trim();
        }
    }
    line
}

/// One rule per non-empty line; `-`, `*`, `•` and `N.`/`N)` prefixes are
/// removed, as are `<think>` blocks.
pub fn parse_rule_list(text: &str) -> Vec<String> {
    strip_reasoning(text).lines().map(strip_bullet).filter(|l| !l.is_empty()).map(str::to_string).collect()
}

/// Send all descriptions in one request with the rule prompt.
pub fn generalize_rules<G: RuleGeneralizer + ?Sized>(descriptions: &[Description], rule_llm: &G) -> Result<Vec<Rule>> {
    if descriptions.is_empty() {
        return Err(Error::EmptyInput("no descriptions to generalize"));
    }
    let docs: Vec<String> = descriptions.iter().map(|d| d.text.clone()).collect();
    let response = complete_rules(rule_llm, RULE_PROMPT, &docs).map_err(|e| match e {
        Error::MalformedResponse(_) => Error::UnparseableResponse,
        other => other,
    })?;
    let rules = parse_rule_list(&response);
    if rules.is_empty() {
        return Err(Error::UnparseableResponse);
    }
    rules.into_iter().map(|t| Rule::new(t, RuleSource::Induced, 1)).collect()
}

#[derive(Debug, Clone)]
pub struct InductionConfig {
    pub params: Params,
    pub stride: usize,
    pub max_in_flight: usize,
    pub perturbed_labels: Vec<String>,
}

impl InductionConfig {
    pub fn new(params: Params, perturbed_labels: Vec<String>) -> Self {
        Self { stride: params.segment_len, params, max_in_flight: 4, perturbed_labels }
    }
}

/// Segment, describe and generalize normal frames into a version-1 rulebase.
pub fn induce_rulebase(
    normal_frames: &[FrameMeta],
    store: &dyn FrameStore,
    backends: &Backends,
    config: &InductionConfig,
) -> Result<RuleBase> {
    let segments = extract_segments(normal_frames, config.params.segment_len, config.stride)?;
    if segments.is_empty() {
        return Err(Error::EmptyInput("fewer normal frames than one segment"));
    }
    let described = describe_segments(&segments, store, backends.captioner.as_ref(), config.max_in_flight)?;
    let rules = generalize_rules(&described.descriptions, backends.rule_llm.as_ref())?;
    RuleBase::new(config.params.clone(), rules, config.perturbed_labels.clone())
}
