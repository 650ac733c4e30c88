//! Feedback loops that grow the rulebase after detection runs.
//!
//! Fine-to-coarse: frames stage 1 flagged but stage 2 cleared are
//! re-described and generalized into extra normal rules. Operator review:
//! final-abnormal frames wait for a person to confirm (optionally adding an
//! anomaly rule) or reject them; rejected frames join the fine-to-coarse
//! batch. Both loops go through a durable [`FeedbackQueue`].

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::backends::Backends;
use crate::cascade::VerdictRecord;
use crate::error::{Error, Result};
use crate::frames::FrameStore;
use crate::induction::{describe_segments, generalize_rules, Segment};
use crate::rulebase::{RuleKind, RuleSource, RuleStore};
use crate::scoring::Verdict;

pub const FEEDBACK_SCHEMA: &str = "cerberus-feedback/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    F2cCandidate,
    UilPending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackStatus {
    Pending,
    Applied,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Evidence {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_score: Option<f64>,
    pub anomaly_score: f64,
    #[serde(default)]
    pub unverified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackItem {
    pub id: u64,
    pub frame_id: String,
    pub scene: String,
    pub seq: u64,
    pub kind: FeedbackKind,
    pub evidence: Evidence,
    pub status: FeedbackStatus,
    /// Unix seconds.
    pub created_at: u64,
    /// Rulebase version the detection ran against.
    pub detected_with_version: u64,
    /// Review item this one was routed from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_item: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<DecisionRecord>,
}

/// What happened to an item, kept for the audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub at: u64,
    /// Rulebase version after the decision was applied.
    pub rulebase_version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routed_to: Option<u64>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn draft(record: &VerdictRecord, kind: FeedbackKind) -> FeedbackItem {
    FeedbackItem {
        id: 0,
        frame_id: record.frame_id.clone(),
        scene: record.scene.clone(),
        seq: record.seq,
        kind,
        evidence: Evidence {
            caption: record.stage2.as_ref().map(|s| s.caption.clone()),
            stage1_score: record.stage1.as_ref().map(|s| s.health.score),
            stage2_score: record.stage2.as_ref().map(|s| s.outcome.health.score),
            anomaly_score: record.anomaly_score,
            unverified: record.unverified,
        },
        status: FeedbackStatus::Pending,
        created_at: now(),
        detected_with_version: record.rulebase_version,
        origin_item: None,
        decision: None,
    }
}

/// Frames flagged by stage 1 and cleared by stage 2. Ids are assigned on
/// enqueue.
pub fn collect_f2c(records: &[VerdictRecord]) -> Vec<FeedbackItem> {
    records
        .iter()
        .filter(|r| {
            r.stage1.as_ref().is_some_and(|s| s.verdict == Verdict::Abnormal)
                && r.stage2.as_ref().is_some_and(|s| s.outcome.verdict == Verdict::Normal)
        })
        .map(|r| draft(r, FeedbackKind::F2cCandidate))
        .collect()
}

/// Frames whose final label is abnormal, for operator review.
pub fn enqueue_uil(records: &[VerdictRecord]) -> Vec<FeedbackItem> {
    records.iter().filter(|r| r.final_label == Verdict::Abnormal).map(|r| draft(r, FeedbackKind::UilPending)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Enqueue { item: FeedbackItem },
    Decide { id: u64, status: FeedbackStatus, decision: DecisionRecord },
}

#[derive(Debug, Serialize, Deserialize)]
struct Line {
    schema: String,
    #[serde(flatten)]
    event: Event,
}

/// Append-only JSONL log of feedback events, replayed on open.
#[derive(Debug)]
pub struct FeedbackQueue {
    path: Option<PathBuf>,
    items: BTreeMap<u64, FeedbackItem>,
    next_id: u64,
    revision: u64,
}

impl FeedbackQueue {
    pub fn in_memory() -> Self {
        Self { path: None, items: BTreeMap::new(), next_id: 1, revision: 0 }
    }

    /// Open or create the queue file.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut q = Self { path: Some(path.clone()), items: BTreeMap::new(), next_id: 1, revision: 0 };
        if !path.exists() {
            File::create(&path).map_err(|e| Error::io(&path, e))?;
            return Ok(q);
        }
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line =
                serde_json::from_str(&line).map_err(|e| Error::StoreCorrupt(format!("{}:{}: {e}", path.display(), n + 1)))?;
            if parsed.schema != FEEDBACK_SCHEMA {
                return Err(Error::SchemaVersionMismatch { expected: FEEDBACK_SCHEMA.into(), found: parsed.schema });
            }
            q.replay(parsed.event);
        }
        Ok(q)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Number of events applied so far; changes on every mutation.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    fn replay(&mut self, event: Event) {
        self.revision += 1;
        match event {
            Event::Enqueue { item } => {
                self.next_id = self.next_id.max(item.id + 1);
                self.items.insert(item.id, item);
            }
            Event::Decide { id, status, decision } => {
                if let Some(item) = self.items.get_mut(&id) {
                    item.status = status;
                    item.decision = Some(decision);
                }
            }
        }
    }

    fn append(&mut self, events: Vec<Event>) -> Result<()> {
        if let Some(path) = &self.path {
            let mut buf = Vec::new();
            for event in &events {
                serde_json::to_writer(&mut buf, &Line { schema: FEEDBACK_SCHEMA.into(), event: event.clone() })?;
                buf.push(b'\n');
            }
            let mut f = OpenOptions::new().append(true).create(true).open(path).map_err(|e| Error::io(path, e))?;
            f.write_all(&buf).and_then(|_| f.sync_data()).map_err(|e| Error::io(path, e))?;
        }
        for event in events {
            self.replay(event);
        }
        Ok(())
    }

    pub fn get(&self, id: u64) -> Option<&FeedbackItem> {
        self.items.get(&id)
    }

    pub fn items(&self) -> impl Iterator<Item = &FeedbackItem> {
        self.items.values()
    }

    pub fn pending(&self, kind: FeedbackKind) -> Vec<&FeedbackItem> {
        self.items.values().filter(|i| i.kind == kind && i.status == FeedbackStatus::Pending).collect()
    }

    /// Assign ids and persist. Drafts for a frame that already has a pending
    /// item of the same kind are skipped. Returns the new ids.
    pub fn enqueue(&mut self, drafts: Vec<FeedbackItem>) -> Result<Vec<u64>> {
        let mut seen: HashSet<(FeedbackKind, String)> =
            self.items.values().filter(|i| i.status == FeedbackStatus::Pending).map(|i| (i.kind, i.frame_id.clone())).collect();
        let mut events = Vec::new();
        let mut ids = Vec::new();
        let mut next = self.next_id;
        for mut item in drafts {
            if !seen.insert((item.kind, item.frame_id.clone())) {
                continue;
            }
            item.id = next;
            item.status = FeedbackStatus::Pending;
            item.decision = None;
            ids.push(next);
            next += 1;
            events.push(Event::Enqueue { item });
        }
        self.append(events)?;
        Ok(ids)
    }

    fn decide(&mut self, id: u64, status: FeedbackStatus, decision: DecisionRecord) -> Result<()> {
        self.append(vec![Event::Decide { id, status, decision }])
    }

    fn pending_item(&self, id: u64, kind: FeedbackKind) -> Result<&FeedbackItem> {
        let item = self.items.get(&id).ok_or(Error::UnknownItem(id))?;
        if item.kind != kind {
            return Err(Error::UnknownItem(id));
        }
        if item.status != FeedbackStatus::Pending {
            return Err(Error::AlreadyDecided(id));
        }
        Ok(item)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct F2cOutcome {
    pub items: Vec<u64>,
    pub rules_added: usize,
    pub rulebase_version: u64,
}

/// Re-describe and generalize the frames behind pending fine-to-coarse
/// items (all of them when `ids` is `None`) and merge the resulting rules.
/// Items that are not pending are ignored; with nothing pending the
/// rulebase is untouched. On backend failure items stay pending.
pub fn apply_f2c(
    rules: &RuleStore,
    queue: &mut FeedbackQueue,
    ids: Option<&[u64]>,
    frames: &dyn FrameStore,
    backends: &Backends,
    max_in_flight: usize,
) -> Result<F2cOutcome> {
    let wanted: Option<HashSet<u64>> = ids.map(|ids| ids.iter().copied().collect());
    let batch: Vec<FeedbackItem> = queue
        .pending(FeedbackKind::F2cCandidate)
        .into_iter()
        .filter(|i| wanted.as_ref().is_none_or(|w| w.contains(&i.id)))
        .cloned()
        .collect();
    if batch.is_empty() {
        return Ok(F2cOutcome { items: vec![], rules_added: 0, rulebase_version: rules.version() });
    }
    let segments: Vec<Segment> = batch.iter().map(|i| Segment { scene_id: i.scene.clone(), frame_ids: vec![i.frame_id.clone()] }).collect();
    let described = describe_segments(&segments, frames, backends.captioner.as_ref(), max_in_flight)?;
    let new_rules = generalize_rules(&described.descriptions, backends.rule_llm.as_ref())?;
    let (added, rb) =
        rules.update(None, |rb| Ok(rb.merge_normal_rules(new_rules.iter().map(|r| r.text.as_str()), RuleSource::F2cRefined)))?;
    let at = now();
    let mut applied = Vec::new();
    for item in &batch {
        queue.decide(
            item.id,
            FeedbackStatus::Applied,
            DecisionRecord { at, rulebase_version: rb.version, rule_text: None, routed_to: None },
        )?;
        applied.push(item.id);
    }
    Ok(F2cOutcome { items: applied, rules_added: added, rulebase_version: rb.version })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum UilDecision {
    Confirm {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rule_text: Option<String>,
    },
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UilOutcome {
    pub item: u64,
    pub status: FeedbackStatus,
    pub rulebase_version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routed_to: Option<u64>,
}

/// Record an operator decision on a review item. Confirming with a rule
/// text adds a custom anomaly rule; rejecting routes the frame to the
/// fine-to-coarse batch.
pub fn apply_uil(
    rules: &RuleStore,
    queue: &mut FeedbackQueue,
    item_id: u64,
    decision: &UilDecision,
    expected_version: Option<u64>,
) -> Result<UilOutcome> {
    let item = queue.pending_item(item_id, FeedbackKind::UilPending)?.clone();
    let at = now();
    match decision {
        UilDecision::Confirm { rule_text } => {
            let text = rule_text.as_deref().map(str::trim).filter(|t| !t.is_empty());
            let version = match text {
                Some(text) => rules.update(expected_version, |rb| rb.add_custom_rule(text, RuleKind::Anomaly))?.1.version,
                None => rules.version(),
            };
            queue.decide(
                item_id,
                FeedbackStatus::Applied,
                DecisionRecord { at, rulebase_version: version, rule_text: text.map(str::to_string), routed_to: None },
            )?;
            Ok(UilOutcome { item: item_id, status: FeedbackStatus::Applied, rulebase_version: version, routed_to: None })
        }
        UilDecision::Reject => {
            let routed = FeedbackItem { kind: FeedbackKind::F2cCandidate, origin_item: Some(item_id), created_at: at, ..item };
            let new_id = queue.enqueue(vec![routed])?.first().copied();
            let version = rules.version();
            queue.decide(
                item_id,
                FeedbackStatus::Rejected,
                DecisionRecord { at, rulebase_version: version, rule_text: None, routed_to: new_id },
            )?;
            Ok(UilOutcome { item: item_id, status: FeedbackStatus::Rejected, rulebase_version: version, routed_to: new_id })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ScriptedBackend;
    use crate::cascade::{CaptionOutcome, GateState, StageOutcome, Timings, VERDICT_SCHEMA};
    use crate::frames::MemoryFrames;
    use crate::rulebase::{Params, Rule, RuleBase};
    use crate::scoring::HealthResult;
    use image::RgbImage;
    use std::sync::Arc;

    fn outcome(verdict: Verdict) -> StageOutcome {
        StageOutcome { health: HealthResult { score: if verdict.is_abnormal() { -0.5 } else { 0.5 }, topk: vec![] }, tau: 0.0, verdict }
    }

    fn record(i: usize, s1: Option<Verdict>, s2: Option<Verdict>) -> VerdictRecord {
        let escalated = s1 == Some(Verdict::Abnormal);
        let final_label = s2.or(s1).unwrap_or(Verdict::Normal);
        VerdictRecord {
            schema: VERDICT_SCHEMA.into(),
            frame_id: format!("f{i}"),
            scene: "s".into(),
            seq: i as u64,
            rulebase_version: 1,
            gate: if s1.is_some() { GateState::Active } else { GateState::Static },
            p: 0.0,
            stage1: s1.map(outcome),
            escalated,
            stage2: s2.map(|v| CaptionOutcome { caption: format!("caption {i}"), outcome: outcome(v) }),
            final_label,
            anomaly_score: 0.0,
            unverified: false,
            errors: vec![],
            timings: Timings::default(),
        }
    }

    fn records() -> Vec<VerdictRecord> {
        // 10 escalated: 4 cleared by stage 2, 6 confirmed; plus 5 stage-1 normal and 3 static.
        let mut v = Vec::new();
        for i in 0..10 {
            v.push(record(i, Some(Verdict::Abnormal), Some(if i < 4 { Verdict::Normal } else { Verdict::Abnormal })));
        }
        for i in 10..15 {
            v.push(record(i, Some(Verdict::Normal), None));
        }
        for i in 15..18 {
            v.push(record(i, None, None));
        }
        v
    }

    fn store() -> RuleStore {
        let rb = RuleBase::new(Params::default(), vec![Rule::new("people walk", RuleSource::Induced, 1).unwrap()], vec!["running".into()])
            .unwrap();
        RuleStore::in_memory(rb)
    }

    fn frames() -> MemoryFrames {
        let mut m = MemoryFrames::new();
        for i in 0..18 {
            m.insert(format!("f{i}"), RgbImage::new(4, 4));
        }
        m
    }

    fn backends(rule_response: &str) -> Backends {
        let b = Arc::new(ScriptedBackend::new(4).with_default_rule_response(rule_response));
        Backends { image_embedder: b.clone(), text_embedder: b.clone(), captioner: b.clone(), rule_llm: b }
    }

    #[test]
    fn collection_sets() {
        assert!(collect_f2c(&records()[10..]).is_empty());
        let f2c = collect_f2c(&records());
        assert_eq!(f2c.len(), 4);
        assert_eq!(f2c[0].evidence.caption.as_deref(), Some("caption 0"));
        assert_eq!(enqueue_uil(&records()).len(), 6);
    }

    #[test]
    fn f2c_adds_dedups_and_is_idempotent() {
        let rules = store();
        let mut q = FeedbackQueue::in_memory();
        let ids = q.enqueue(collect_f2c(&records())).unwrap();
        assert_eq!(ids, vec![1, 2, 3, 4]);
        // re-enqueueing the same frames while pending is a no-op
        assert!(q.enqueue(collect_f2c(&records())).unwrap().is_empty());

        let out = apply_f2c(&rules, &mut q, None, &frames(), &backends("- cyclists ride by"), 2).unwrap();
        assert_eq!((out.rules_added, out.rulebase_version), (1, 2));
        assert_eq!(rules.snapshot().normal_rules.last().unwrap().source, RuleSource::F2cRefined);
        assert!(q.pending(FeedbackKind::F2cCandidate).is_empty());
        assert!(q.items().all(|i| i.decision.as_ref().unwrap().rulebase_version == 2));

        let again = apply_f2c(&rules, &mut q, Some(&ids), &frames(), &backends("- something else"), 2).unwrap();
        assert!(again.items.is_empty());
        assert_eq!(rules.version(), 2);

        q.enqueue(collect_f2c(&records())).unwrap();
        let dup = apply_f2c(&rules, &mut q, None, &frames(), &backends("- People  walk"), 1).unwrap();
        assert_eq!((dup.rules_added, dup.rulebase_version), (0, 3));
        assert_eq!(rules.snapshot().normal_rules.len(), 2);
    }

    #[test]
    fn f2c_backend_failure_keeps_items_pending() {
        let rules = store();
        let mut q = FeedbackQueue::in_memory();
        q.enqueue(collect_f2c(&records())).unwrap();
        let b = Arc::new(
            ScriptedBackend::new(4).with_failing_frame("f0").with_failing_frame("f1").with_failing_frame("f2").with_failing_frame("f3"),
        );
        let bk = Backends { image_embedder: b.clone(), text_embedder: b.clone(), captioner: b.clone(), rule_llm: b };
        assert!(matches!(apply_f2c(&rules, &mut q, None, &frames(), &bk, 1), Err(Error::BackendUnavailable(_))));
        assert_eq!(q.pending(FeedbackKind::F2cCandidate).len(), 4);
        assert_eq!(rules.version(), 1);
    }

    #[test]
    fn uil_decisions() {
        let rules = store();
        let mut q = FeedbackQueue::in_memory();
        let ids = q.enqueue(enqueue_uil(&records())).unwrap();
        let confirm = UilDecision::Confirm { rule_text: Some("loitering is anomalous".into()) };
        let out = apply_uil(&rules, &mut q, ids[0], &confirm, None).unwrap();
        assert_eq!(out.rulebase_version, 2);
        assert_eq!(rules.snapshot().custom_anomaly_rules[0].text, "loitering is anomalous");
        assert!(matches!(apply_uil(&rules, &mut q, ids[0], &confirm, None), Err(Error::AlreadyDecided(_))));
        assert!(matches!(apply_uil(&rules, &mut q, 999, &UilDecision::Reject, None), Err(Error::UnknownItem(999))));

        let plain = apply_uil(&rules, &mut q, ids[1], &UilDecision::Confirm { rule_text: None }, None).unwrap();
        assert_eq!(plain.rulebase_version, 2);

        let rej = apply_uil(&rules, &mut q, ids[2], &UilDecision::Reject, None).unwrap();
        let routed = q.get(rej.routed_to.unwrap()).unwrap();
        assert_eq!(routed.kind, FeedbackKind::F2cCandidate);
        assert_eq!(routed.origin_item, Some(ids[2]));
        assert_eq!(q.pending(FeedbackKind::F2cCandidate).len(), 1);
        assert_eq!(rules.version(), 2);

        assert!(matches!(
            apply_uil(&rules, &mut q, ids[3], &UilDecision::Confirm { rule_text: Some("x".into()) }, Some(1)),
            Err(Error::StaleVersion { .. })
        ));
        assert_eq!(q.get(ids[3]).unwrap().status, FeedbackStatus::Pending);
    }

    #[test]
    fn queue_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        let rules = store();
        let ids = {
            let mut q = FeedbackQueue::open(&path).unwrap();
            let ids = q.enqueue(enqueue_uil(&records())).unwrap();
            apply_uil(&rules, &mut q, ids[0], &UilDecision::Reject, None).unwrap();
            ids
        };
        let q = FeedbackQueue::open(&path).unwrap();
        assert_eq!(q.get(ids[0]).unwrap().status, FeedbackStatus::Rejected);
        assert_eq!(q.pending(FeedbackKind::UilPending).len(), 5);
        assert_eq!(q.pending(FeedbackKind::F2cCandidate).len(), 1);
        let mut q = q;
        assert_eq!(q.enqueue(collect_f2c(&records())).unwrap().first(), Some(&8));
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().all(|l| l.contains(FEEDBACK_SCHEMA)));
    }
}
