//! Online detection: motion gate → coarse image-space scoring → caption and
//! text-space scoring for frames the coarse stage finds suspicious.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use crossbeam_channel::bounded;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backends::{
    caption_frame, embed_image, embed_texts, Backends, Captioner, ImageEmbedder, ImageInput, TextEmbedder, DESCRIBE_PROMPT,
};
use crate::error::{Error, Result};
use crate::frames::{FrameMeta, FrameStore};
use crate::motion::{prompt_frame, FrameMotion, GrayFrame, MotionSettings, RegionConfig};
use crate::rulebase::{build_candidate_pool, CandidatePool, Params, RuleBase};
use crate::scoring::{classify, health_score, HealthResult, PoolEmbeddings, Verdict};

pub const VERDICT_SCHEMA: &str = "cerberus-verdict/1";
pub const DEFAULT_QUEUE_CAPACITY: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Both,
    CoarseOnly,
    FineOnly,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Mode::Both),
            "coarse" | "coarse_only" => Ok(Mode::CoarseOnly),
            "fine" | "fine_only" => Ok(Mode::FineOnly),
            other => Err(Error::BadParams(format!("unknown mode {other:?}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Both => "both",
            Mode::CoarseOnly => "coarse_only",
            Mode::FineOnly => "fine_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    pub mode: Mode,
    pub params: Params,
    /// Coarse-stage anomaly recall below which filtering numbers are not
    /// meaningful.
    pub recall_target: f64,
    pub regions: RegionConfig,
    /// Data-parallel workers for the coarse stage. With one coarse and one
    /// fine worker frames are processed strictly one after another.
    pub coarse_workers: usize,
    pub fine_workers: usize,
    pub queue_capacity: usize,
    /// Write rendered prompted frames here as `<frame_id>.png`.
    pub dump_prompts: Option<PathBuf>,
}

impl CascadeConfig {
    pub fn new(mode: Mode, params: Params) -> Self {
        Self {
            mode,
            params,
            recall_target: 0.95,
            regions: RegionConfig::default(),
            coarse_workers: 1,
            fine_workers: 1,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            dump_prompts: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(self.recall_target > 0.0 && self.recall_target < 1.0) {
            return Err(Error::BadParams(format!("recall target {} outside (0,1)", self.recall_target)));
        }
        if self.coarse_workers == 0 || self.fine_workers == 0 || self.queue_capacity == 0 {
            return Err(Error::BadParams("worker counts and queue capacity must be >= 1".into()));
        }
        Ok(())
    }

    fn motion(&self) -> MotionSettings {
        MotionSettings { epsilon_motion: self.params.epsilon_motion, alpha_prompt: self.params.alpha_prompt, regions: self.regions }
    }

    fn sequential(&self) -> bool {
        self.coarse_workers == 1 && self.fine_workers == 1
    }
}

/// The candidate pool embedded in both spaces, tied to one rulebase version.
#[derive(Debug, Clone)]
pub struct PreparedPool {
    pub rulebase_version: u64,
    pub candidates: CandidatePool,
    pub image_space: PoolEmbeddings,
    pub text_space: PoolEmbeddings,
}

impl PreparedPool {
    pub fn build(rulebase: &RuleBase, backends: &Backends) -> Result<Self> {
        let candidates = build_candidate_pool(rulebase)?;
        let texts = candidates.texts();
        let polarities = candidates.polarities();
        let image_vecs = embed_texts(backends.image_embedder.as_ref(), &texts)?;
        let text_vecs = embed_texts(backends.text_embedder.as_ref(), &texts)?;
        Ok(Self {
            rulebase_version: rulebase.version,
            image_space: PoolEmbeddings::new(&image_vecs, &polarities)?,
            text_space: PoolEmbeddings::new(&text_vecs, &polarities)?,
            candidates,
        })
    }
}

/// Holder for the pool in use. A frame takes one snapshot when it enters the
/// pipeline and is scored against it in both stages.
#[derive(Debug)]
pub struct SharedPool(RwLock<Arc<PreparedPool>>);

impl SharedPool {
    pub fn new(pool: PreparedPool) -> Self {
        Self(RwLock::new(Arc::new(pool)))
    }

    pub fn current(&self) -> Arc<PreparedPool> {
        self.0.read().expect("pool lock poisoned").clone()
    }

    pub fn swap(&self, pool: PreparedPool) -> Arc<PreparedPool> {
        std::mem::replace(&mut *self.0.write().expect("pool lock poisoned"), Arc::new(pool))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateState {
    Static,
    Active,
    /// Gate not applied (fine-only mode, or the frame could not be read).
    Bypassed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub health: HealthResult,
    pub tau: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionOutcome {
    pub caption: String,
    #[serde(flatten)]
    pub outcome: StageOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub gate_s: f64,
    pub stage1_s: f64,
    pub stage2_s: f64,
}

impl Timings {
    pub fn total(&self) -> f64 {
        self.gate_s + self.stage1_s + self.stage2_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub schema: String,
    pub frame_id: String,
    pub scene: String,
    pub seq: u64,
    pub rulebase_version: u64,
    pub gate: GateState,
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1: Option<StageOutcome>,
    /// Sent on to the caption stage.
    pub escalated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2: Option<CaptionOutcome>,
    pub final_label: Verdict,
    pub anomaly_score: f64,
    /// Marked abnormal because a stage failed, not because it scored low.
    pub unverified: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
    pub timings: Timings,
}

impl VerdictRecord {
    fn pending(meta: &FrameMeta, rulebase_version: u64) -> Self {
        Self {
            schema: VERDICT_SCHEMA.to_string(),
            frame_id: meta.frame_id.clone(),
            scene: meta.scene.clone(),
            seq: meta.seq,
            rulebase_version,
            gate: GateState::Bypassed,
            p: 0.0,
            stage1: None,
            escalated: false,
            stage2: None,
            final_label: Verdict::Normal,
            anomaly_score: 0.0,
            unverified: false,
            errors: Vec::new(),
            timings: Timings::default(),
        }
    }

    /// Discarded before the caption stage, by the gate or by stage 1.
    pub fn filtered(&self) -> bool {
        self.gate == GateState::Static || self.stage1.as_ref().is_some_and(|s| s.verdict == Verdict::Normal)
    }

    fn finish(mut self) -> Self {
        self.final_label = if self.gate == GateState::Static {
            Verdict::Normal
        } else if self.unverified {
            Verdict::Abnormal
        } else if let Some(s2) = &self.stage2 {
            s2.outcome.verdict
        } else if let Some(s1) = &self.stage1 {
            s1.verdict
        } else {
            Verdict::Abnormal
        };
        self.anomaly_score = anomaly_score(&self);
        self
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Tiered score: static frames 0, frames cleared or decided by stage 1 in
/// (1,2), caption-stage frames in (2,3). Frames flagged unverified get 3 if
/// they reached the caption stage and 2 otherwise.
pub fn anomaly_score(record: &VerdictRecord) -> f64 {
    if record.gate == GateState::Static {
        return 0.0;
    }
    if record.unverified {
        return if record.escalated { 3.0 } else { 2.0 };
    }
    if let Some(s2) = &record.stage2 {
        return 2.0 + logistic(s2.outcome.tau - s2.outcome.health.score);
    }
    match &record.stage1 {
        Some(s1) => 1.0 + logistic(s1.tau - s1.health.score),
        None => 2.0,
    }
}

/// Frames per second of a cascade with mean coarse latency `t_c`, mean fine
/// latency `t_f` and escalation fraction `rho`.
pub fn model_throughput(t_c: f64, t_f: f64, rho: f64) -> Result<f64> {
    if !(t_c >= 0.0 && t_f > 0.0 && t_c.is_finite() && t_f.is_finite()) || !(0.0..=1.0).contains(&rho) {
        return Err(Error::BadParams(format!("throughput model needs T_C >= 0, T_F > 0, rho in [0,1]; got {t_c}, {t_f}, {rho}")));
    }
    let denom = t_c + rho * t_f;
    if denom <= 0.0 {
        return Err(Error::BadParams("T_C + rho*T_F must be > 0".into()));
    }
    Ok(1.0 / denom)
}

/// Embed one (prompted) frame and score it in image space.
pub fn stage1<E: ImageEmbedder + ?Sized>(
    frame_id: &str,
    image: &RgbImage,
    pool: &PoolEmbeddings,
    embedder: &E,
    k: usize,
    tau1: f64,
) -> Result<StageOutcome> {
    let v = embed_image(embedder, &ImageInput::new(frame_id, image))?;
    let health = health_score(&v, pool, k)?;
    Ok(StageOutcome { verdict: classify(health.score, tau1), tau: tau1, health })
}

/// Caption one frame and score the caption in text space.
pub fn stage2<C, E>(
    frame_id: &str,
    image: &RgbImage,
    pool: &PoolEmbeddings,
    captioner: &C,
    text_embedder: &E,
    k: usize,
    tau2: f64,
) -> Result<CaptionOutcome>
where
    C: Captioner + ?Sized,
    E: TextEmbedder + ?Sized,
{
    let caption = caption_frame(captioner, &[ImageInput::new(frame_id, image)], DESCRIBE_PROMPT)?;
    let v = embed_texts(text_embedder, std::slice::from_ref(&caption))?.remove(0);
    let health = health_score(&v, pool, k)?;
    Ok(CaptionOutcome { caption, outcome: StageOutcome { verdict: classify(health.score, tau2), tau: tau2, health } })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunStats {
    pub frames: usize,
    pub static_frames: usize,
    pub active_frames: usize,
    pub escalated: usize,
    pub stage2_calls: usize,
    pub failed_frames: usize,
    pub wall_s: f64,
}

impl RunStats {
    /// Escalated fraction of gate-active frames.
    pub fn rho(&self) -> f64 {
        if self.active_frames == 0 {
            0.0
        } else {
            self.escalated as f64 / self.active_frames as f64
        }
    }

    fn count(&mut self, r: &VerdictRecord) {
        self.frames += 1;
        match r.gate {
            GateState::Static => self.static_frames += 1,
            GateState::Active => self.active_frames += 1,
            GateState::Bypassed => {}
        }
        if r.escalated && r.gate == GateState::Active {
            self.escalated += 1;
        }
        if r.stage2.is_some() || (r.escalated && r.unverified) {
            self.stage2_calls += 1;
        }
        if !r.errors.is_empty() {
            self.failed_frames += 1;
        }
    }
}

enum Routed {
    Done(VerdictRecord),
    Escalate(InFlight),
}

/// A frame that has passed the gate and is waiting for the model stages.
struct InFlight {
    idx: usize,
    record: VerdictRecord,
    pool: Arc<PreparedPool>,
    /// Image the model stages see: the prompted frame, or the raw frame when
    /// no prompt was rendered.
    image: Option<Arc<RgbImage>>,
}

/// Tracks, per scene, the gray frame of the latest seq seen and of the one
/// before it, so duplicated frames (same seq) share a predecessor.
#[derive(Default)]
struct Predecessors {
    scenes: HashMap<String, SceneState>,
}

#[derive(Default)]
struct SceneState {
    prev: Option<Arc<GrayFrame>>,
    cur: Option<(u64, Arc<GrayFrame>)>,
}

impl Predecessors {
    fn predecessor(&self, scene: &str, seq: u64) -> Option<Arc<GrayFrame>> {
        let st = self.scenes.get(scene)?;
        match &st.cur {
            Some((s, g)) if *s < seq => Some(g.clone()),
            Some(_) => st.prev.clone(),
            None => None,
        }
    }

    fn record(&mut self, scene: &str, seq: u64, gray: Arc<GrayFrame>) {
        let st = self.scenes.entry(scene.to_string()).or_default();
        match &st.cur {
            Some((s, _)) if *s == seq => {}
            _ => {
                st.prev = st.cur.take().map(|(_, g)| g);
                st.cur = Some((seq, gray));
            }
        }
    }
}

fn check_order(frames: &[FrameMeta]) -> Result<()> {
    let mut last: HashMap<&str, u64> = HashMap::new();
    for f in frames {
        if let Some(prev) = last.insert(&f.scene, f.seq) {
            if f.seq < prev {
                return Err(Error::BadParams(format!(
                    "frame {} goes back in time in scene {} ({} after {prev})",
                    f.frame_id, f.scene, f.seq
                )));
            }
        }
    }
    Ok(())
}

/// File name used for a frame's rendered prompt image in the dump directory.
pub fn dump_name(frame_id: &str) -> String {
    let safe: String = frame_id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.#".contains(c) { c } else { '_' }).collect();
    format!("{safe}.png")
}

struct Runner<'a> {
    store: &'a dyn FrameStore,
    pools: &'a SharedPool,
    backends: &'a Backends,
    config: &'a CascadeConfig,
    motion: MotionSettings,
}

impl Runner<'_> {
    fn gate(&self, idx: usize, meta: &FrameMeta, preds: &mut Predecessors) -> InFlight {
        let start = Instant::now();
        let pool = self.pools.current();
        let mut record = VerdictRecord::pending(meta, pool.rulebase_version);
        let image = match self.store.load(&meta.frame_id) {
            Ok(img) => img,
            Err(e) => {
                record.errors.push(format!("load: {e}"));
                record.unverified = true;
                record.timings.gate_s = start.elapsed().as_secs_f64();
                return InFlight { idx, record, pool, image: None };
            }
        };
        let gray = Arc::new(GrayFrame::from_rgb(&image));
        let prev = preds.predecessor(&meta.scene, meta.seq);
        preds.record(&meta.scene, meta.seq, gray.clone());
        let motion = prompt_frame(prev.as_deref(), &gray, &image, &self.motion);
        let mut staged = Some(image.clone());
        match motion {
            Ok(FrameMotion::Static { proportion }) => {
                record.p = proportion;
                record.gate = GateState::Static;
            }
            Ok(FrameMotion::Active(prompted)) => {
                record.p = prompted.proportion;
                record.gate = GateState::Active;
                if let Some(dir) = &self.config.dump_prompts {
                    if let Err(e) = prompted.rendered.save(dir.join(dump_name(&meta.frame_id))) {
                        record.errors.push(format!("dump: {e}"));
                    }
                }
                if self.config.mode != Mode::FineOnly {
                    staged = Some(Arc::new(prompted.rendered));
                }
            }
            Err(e) => {
                record.errors.push(format!("gate: {e}"));
                record.gate = GateState::Bypassed;
            }
        }
        if self.config.mode == Mode::FineOnly {
            record.gate = GateState::Bypassed;
        }
        record.timings.gate_s = start.elapsed().as_secs_f64();
        InFlight { idx, record, pool, image: staged }
    }

    /// Finish the frame here or hand it on to the caption stage.
    fn coarse(&self, mut f: InFlight) -> Routed {
        if f.record.gate == GateState::Static || f.record.unverified && f.image.is_none() {
            return Routed::Done(f.record.finish());
        }
        if self.config.mode == Mode::FineOnly {
            f.record.escalated = true;
            return Routed::Escalate(f);
        }
        let image = f.image.as_ref().expect("image present for active frame");
        let start = Instant::now();
        let p = &self.config.params;
        let result = stage1(&f.record.frame_id, image, &f.pool.image_space, self.backends.image_embedder.as_ref(), p.k, p.tau1);
        f.record.timings.stage1_s = start.elapsed().as_secs_f64();
        let escalate = match result {
            Ok(outcome) => {
                let abnormal = outcome.verdict.is_abnormal();
                f.record.stage1 = Some(outcome);
                abnormal
            }
            Err(e) => {
                f.record.errors.push(format!("stage1: {e}"));
                if self.config.mode == Mode::CoarseOnly {
                    f.record.unverified = true;
                }
                true
            }
        };
        if escalate && self.config.mode == Mode::Both {
            f.record.escalated = true;
            Routed::Escalate(f)
        } else {
            Routed::Done(f.record.finish())
        }
    }

    fn fine(&self, mut f: InFlight) -> VerdictRecord {
        let image = f.image.as_ref().expect("image present for escalated frame");
        let start = Instant::now();
        let p = &self.config.params;
        let result = stage2(
            &f.record.frame_id,
            image,
            &f.pool.text_space,
            self.backends.captioner.as_ref(),
            self.backends.text_embedder.as_ref(),
            p.k,
            p.tau2,
        );
        f.record.timings.stage2_s = start.elapsed().as_secs_f64();
        match result {
            Ok(outcome) => f.record.stage2 = Some(outcome),
            Err(e) => {
                f.record.errors.push(format!("stage2: {e}"));
                f.record.unverified = true;
            }
        }
        f.record.finish()
    }
}

/// Run every frame through the cascade, handing records to `sink` in input
/// order. Per-frame failures are recorded, not returned; an error from
/// `sink` stops the run.
pub fn process_stream_with<F>(
    frames: &[FrameMeta],
    store: &dyn FrameStore,
    pools: &SharedPool,
    backends: &Backends,
    config: &CascadeConfig,
    mut sink: F,
) -> Result<RunStats>
where
    F: FnMut(VerdictRecord) -> Result<()>,
{
    config.validate()?;
    check_order(frames)?;
    if let Some(dir) = &config.dump_prompts {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let runner = Runner { store, pools, backends, config, motion: config.motion() };
    let mut stats = RunStats::default();
    let start = Instant::now();
    let mut emit = |r: VerdictRecord, stats: &mut RunStats| {
        stats.count(&r);
        sink(r)
    };

    if config.sequential() {
        let mut preds = Predecessors::default();
        for (idx, meta) in frames.iter().enumerate() {
            let f = runner.gate(idx, meta, &mut preds);
            let record = match runner.coarse(f) {
                Routed::Done(r) => r,
                Routed::Escalate(f) => runner.fine(f),
            };
            emit(record, &mut stats)?;
        }
        stats.wall_s = start.elapsed().as_secs_f64();
        return Ok(stats);
    }

    let cap = config.queue_capacity;
    let (gate_tx, gate_rx) = bounded::<InFlight>(cap);
    let (fine_tx, fine_rx) = bounded::<InFlight>(cap);
    let (out_tx, out_rx) = bounded::<(usize, VerdictRecord)>(cap);
    let abort = AtomicBool::new(false);
    let mut outcome = Ok(());

    std::thread::scope(|s| {
        let runner = &runner;
        let abort = &abort;
        s.spawn(move || {
            let mut preds = Predecessors::default();
            for (idx, meta) in frames.iter().enumerate() {
                if abort.load(Ordering::Relaxed) || gate_tx.send(runner.gate(idx, meta, &mut preds)).is_err() {
                    break;
                }
            }
        });
        for _ in 0..config.coarse_workers {
            let (rx, fine_tx, out_tx) = (gate_rx.clone(), fine_tx.clone(), out_tx.clone());
            s.spawn(move || {
                for f in rx {
                    let idx = f.idx;
                    let sent = match runner.coarse(f) {
                        Routed::Done(r) => out_tx.send((idx, r)).is_ok(),
                        Routed::Escalate(f) => fine_tx.send(f).is_ok(),
                    };
                    if !sent {
                        break;
                    }
                }
            });
        }
        for _ in 0..config.fine_workers {
            let (rx, out_tx) = (fine_rx.clone(), out_tx.clone());
            s.spawn(move || {
                for f in rx {
                    let idx = f.idx;
                    if out_tx.send((idx, runner.fine(f))).is_err() {
                        break;
                    }
                }
            });
        }
        drop((gate_rx, fine_tx, fine_rx, out_tx));

        let mut pending: HashMap<usize, VerdictRecord> = HashMap::new();
        let mut next = 0;
        for (idx, record) in out_rx.iter() {
            if outcome.is_err() {
                continue;
            }
            pending.insert(idx, record);
            while let Some(r) = pending.remove(&next) {
                next += 1;
                if let Err(e) = emit(r, &mut stats) {
                    abort.store(true, Ordering::Relaxed);
                    outcome = Err(e);
                    break;
                }
            }
        }
    });
    outcome?;
    stats.wall_s = start.elapsed().as_secs_f64();
    Ok(stats)
}

pub fn process_stream(
    frames: &[FrameMeta],
    store: &dyn FrameStore,
    pools: &SharedPool,
    backends: &Backends,
    config: &CascadeConfig,
) -> Result<(Vec<VerdictRecord>, RunStats)> {
    let mut out = Vec::with_capacity(frames.len());
    let stats = process_stream_with(frames, store, pools, backends, config, |r| {
        out.push(r);
        Ok(())
    })?;
    Ok((out, stats))
}

pub fn write_verdicts(path: impl AsRef<Path>, records: &[VerdictRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_verdicts(reader: impl BufRead) -> Result<Vec<VerdictRecord>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("<verdicts>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: VerdictRecord = serde_json::from_str(&line)?;
        if r.schema != VERDICT_SCHEMA {
            return Err(Error::SchemaVersionMismatch { expected: VERDICT_SCHEMA.into(), found: r.schema });
        }
        out.push(r);
    }
    Ok(out)
}

pub fn read_verdicts(path: impl AsRef<Path>) -> Result<Vec<VerdictRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_verdicts(BufReader::new(file))
}
