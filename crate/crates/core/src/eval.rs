//! Benchmark manifests, metrics and the normal-frame duplication protocol.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::Backends;
use crate::cascade::{model_throughput, process_stream, CascadeConfig, GateState, Mode, SharedPool, VerdictRecord};
use crate::error::{Error, Result};
use crate::frames::{DiskFrames, FrameMeta, FrameStore};
use crate::rulebase::write_atomic;
use crate::scoring::Verdict;

pub const MANIFEST_SCHEMA: &str = "cerberus-manifest/1";
pub const REPORT_SCHEMA: &str = "cerberus-report/1";

/// Largest allowed gap between the requested and achieved anomaly ratio.
pub const RATIO_TOLERANCE: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(default = "manifest_schema")]
    pub schema: String,
    pub frame_id: String,
    pub path: PathBuf,
    /// 0 normal, 1 abnormal.
    pub label: u8,
    pub scene: String,
    pub seq: u64,
}

fn manifest_schema() -> String {
    MANIFEST_SCHEMA.to_string()
}

impl ManifestEntry {
    pub fn new(frame_id: impl Into<String>, path: impl Into<PathBuf>, label: u8, scene: impl Into<String>, seq: u64) -> Self {
        Self { schema: manifest_schema(), frame_id: frame_id.into(), path: path.into(), label, scene: scene.into(), seq }
    }

    pub fn is_anomaly(&self) -> bool {
        self.label == 1
    }

    pub fn meta(&self) -> FrameMeta {
        FrameMeta::new(self.frame_id.clone(), self.scene.clone(), self.seq)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative image paths resolve against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { entries, base_dir: PathBuf::from(".") };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn anomalies(&self) -> usize {
        self.entries.iter().filter(|e| e.is_anomaly()).count()
    }

    pub fn anomaly_ratio(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.anomalies() as f64 / self.entries.len() as f64
        }
    }

    /// Frame ids unique, labels 0/1, and per scene the seq values appear in
    /// non-decreasing order and cover a contiguous range. Repeated seq values
    /// are duplicated frames.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut scenes: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
        for e in &self.entries {
            if e.schema != MANIFEST_SCHEMA {
                return Err(Error::SchemaVersionMismatch { expected: MANIFEST_SCHEMA.into(), found: e.schema.clone() });
            }
            if !ids.insert(e.frame_id.as_str()) {
                return Err(Error::InvalidManifest(format!("duplicate frame_id {}", e.frame_id)));
            }
            if e.label > 1 {
                return Err(Error::InvalidManifest(format!("frame {} has label {}", e.frame_id, e.label)));
            }
            scenes.entry(&e.scene).or_default().push(e.seq);
        }
        for (scene, seqs) in scenes {
            for w in seqs.windows(2) {
                if w[1] < w[0] {
                    return Err(Error::InvalidManifest(format!("scene {scene}: seq {} follows {}", w[1], w[0])));
                }
                if w[1] > w[0] + 1 {
                    return Err(Error::InvalidManifest(format!("scene {scene}: seq jumps from {} to {}", w[0], w[1])));
                }
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> Vec<FrameMeta> {
        self.entries.iter().map(ManifestEntry::meta).collect()
    }

    pub fn truth(&self) -> HashMap<&str, bool> {
        self.entries.iter().map(|e| (e.frame_id.as_str(), e.is_anomaly())).collect()
    }

    pub fn disk_store(&self) -> DiskFrames {
        let mut store = DiskFrames::new(&self.base_dir);
        for e in &self.entries {
            store.insert(e.frame_id.clone(), e.path.clone());
        }
        store
    }

    pub fn parse(reader: impl BufRead, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<manifest>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::InvalidManifest(format!("line {}: {e}", n + 1)))?;
            entries.push(entry);
        }
        let m = Self { entries, base_dir: base_dir.into() };
        m.validate()?;
        Ok(m)
    }

    /// Relative image paths resolve against the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(BufReader::new(file), base)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut buf, e)?;
            buf.push(b'\n');
        }
        write_atomic(path.as_ref(), &buf)
    }
}

/// Mann–Whitney AUC: probability that a random anomaly outscores a random
/// normal frame, ties counting one half. `labels[i]` is true for anomalies.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite);
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the anomalies.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
}

/// Precision is 1.0 when nothing is predicted abnormal; recall is 1.0 when
/// there is nothing to find.
pub fn precision_recall(predicted: &[bool], truth: &[bool]) -> Result<PrecisionRecall> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch(predicted.len(), truth.len()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(PrecisionRecall { precision: ratio(tp, tp + fp), recall: ratio(tp, tp + fn_) })
}

/// Share of frames dropped before the caption stage: static plus stage-1
/// normal.
pub fn filtering_proportion(records: &[VerdictRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no verdict records"));
    }
    Ok(records.iter().filter(|r| r.filtered()).count() as f64 / records.len() as f64)
}

/// Share of true anomalies that got past the gate and stage 1.
pub fn coarse_recall(records: &[VerdictRecord], truth: &[bool]) -> Result<f64> {
    if records.len() != truth.len() {
        return Err(Error::LengthMismatch(records.len(), truth.len()));
    }
    let anomalies = truth.iter().filter(|&&t| t).count();
    if anomalies == 0 {
        return Ok(1.0);
    }
    let kept = records.iter().zip(truth).filter(|(r, &t)| t && !r.filtered()).count();
    Ok(kept as f64 / anomalies as f64)
}

/// Copy counts, original included, for `normals` entries summing to `total`
/// and differing by at most one. Entries that get the larger count are
/// spread evenly over the list.
fn round_robin_counts(normals: usize, total: usize) -> Vec<usize> {
    let base = total / normals;
    let extra = total - base * normals;
    (0..normals).map(|j| base + usize::from((j + 1) * extra / normals > j * extra / normals)).collect()
}

/// Duplicate normal entries until anomalies make up `target_ratio` of the
/// manifest. Duplicates follow their original, share its path and seq, and
/// get ids `<id>#dup<n>`.
pub fn duplicate_normals(manifest: &DatasetManifest, target_ratio: f64) -> Result<DatasetManifest> {
    let current = manifest.anomaly_ratio();
    let anomalies = manifest.anomalies();
    let normals = manifest.len() - anomalies;
    if (target_ratio - current).abs() < 1e-12 && target_ratio > 0.0 {
        return Ok(manifest.clone());
    }
    if !(target_ratio > 0.0 && target_ratio < current) || normals == 0 {
        return Err(Error::RatioNotReducible { target: target_ratio, current });
    }
    let wanted = (anomalies as f64 * (1.0 - target_ratio) / target_ratio).round() as usize;
    let achieved = anomalies as f64 / (anomalies + wanted) as f64;
    if (achieved - target_ratio).abs() > RATIO_TOLERANCE || wanted < normals {
        return Err(Error::RatioNotReducible { target: target_ratio, current });
    }
    let counts = round_robin_counts(normals, wanted);
    let mut taken = HashSet::new();
    for e in &manifest.entries {
        taken.insert(e.frame_id.clone());
    }
    let mut entries = Vec::with_capacity(anomalies + wanted);
    let mut j = 0;
    for e in &manifest.entries {
        entries.push(e.clone());
        if e.is_anomaly() {
            continue;
        }
        let mut n = 0;
        for _ in 1..counts[j] {
            let id = loop {
                n += 1;
                let id = format!("{}#dup{n}", e.frame_id);
                if taken.insert(id.clone()) {
                    break id;
                }
            };
            entries.push(ManifestEntry { frame_id: id, ..e.clone() });
        }
        j += 1;
    }
    let out = DatasetManifest { entries, base_dir: manifest.base_dir.clone() };
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub mode: Mode,
    pub frames: usize,
    pub anomalies: usize,
    /// Absent when the frames hold a single class.
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub filtering_proportion: f64,
    pub coarse_recall: f64,
    /// False when coarse recall is under the recall target, in which case
    /// the filtering proportion says nothing useful.
    pub filtering_valid: bool,
    pub throughput_fps: f64,
    /// Sum of all per-stage durations.
    pub overhead_s: f64,
    pub wall_s: Option<f64>,
    /// Escalated fraction of gate-active frames.
    pub rho_measured: f64,
    /// Mean gate + stage-1 time per frame, static frames included.
    pub t_c: f64,
    /// Mean stage-2 time per escalated frame.
    pub t_f: Option<f64>,
    pub modeled_fps: Option<f64>,
    pub static_frames: usize,
    pub active_frames: usize,
    pub escalated: usize,
    pub unverified: usize,
    pub rulebase_versions: Vec<u64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::SchemaVersionMismatch { expected: REPORT_SCHEMA.into(), found: r.schema });
        }
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn mode_of(records: &[VerdictRecord]) -> Mode {
    if records.iter().any(|r| r.gate == GateState::Bypassed && r.stage2.is_some()) {
        Mode::FineOnly
    } else if records.iter().any(|r| r.escalated) {
        Mode::Both
    } else {
        Mode::CoarseOnly
    }
}

/// Metrics over a finished run. Records are matched to the manifest by
/// frame id; `wall_s` is the end-to-end run time when known, otherwise
/// throughput is derived from the summed stage timings.
pub fn compute_report(
    manifest: &DatasetManifest,
    records: &[VerdictRecord],
    wall_s: Option<f64>,
    recall_target: f64,
) -> Result<MetricsReport> {
    if records.is_empty() || manifest.is_empty() {
        return Err(Error::EmptyInput("no frames to evaluate"));
    }
    if records.len() != manifest.len() {
        return Err(Error::LengthMismatch(records.len(), manifest.len()));
    }
    let truth_map = manifest.truth();
    let truth = records
        .iter()
        .map(|r| truth_map.get(r.frame_id.as_str()).copied().ok_or_else(|| Error::UnknownFrame(r.frame_id.clone())))
        .collect::<Result<Vec<bool>>>()?;
    let scores: Vec<f64> = records.iter().map(|r| r.anomaly_score).collect();
    let auc = match auc(&scores, &truth) {
        Ok(v) => Some(v),
        Err(Error::SingleClass) => None,
        Err(e) => return Err(e),
    };
    let predicted: Vec<bool> = records.iter().map(|r| r.final_label == Verdict::Abnormal).collect();
    let pr = precision_recall(&predicted, &truth)?;
    let filtering = filtering_proportion(records)?;
    let recall_c = coarse_recall(records, &truth)?;

    let n = records.len() as f64;
    let overhead_s: f64 = records.iter().map(|r| r.timings.total()).sum();
    let t_c = records.iter().map(|r| r.timings.gate_s + r.timings.stage1_s).sum::<f64>() / n;
    let fine: Vec<&VerdictRecord> = records.iter().filter(|r| r.escalated).collect();
    let t_f = (!fine.is_empty()).then(|| fine.iter().map(|r| r.timings.stage2_s).sum::<f64>() / fine.len() as f64);
    let rho_all = fine.len() as f64 / n;
    let modeled_fps = match t_f {
        Some(t_f) if t_f > 0.0 => model_throughput(t_c, t_f, rho_all).ok(),
        _ if t_c > 0.0 => Some(1.0 / t_c),
        _ => None,
    };
    let elapsed = wall_s.unwrap_or(overhead_s);
    let throughput_fps = if elapsed > 0.0 { n / elapsed } else { f64::INFINITY };

    let static_frames = records.iter().filter(|r| r.gate == GateState::Static).count();
    let active_frames = records.iter().filter(|r| r.gate == GateState::Active).count();
    let escalated = records.iter().filter(|r| r.gate == GateState::Active && r.escalated).count();
    let rho_measured = if active_frames == 0 { 0.0 } else { escalated as f64 / active_frames as f64 };
    let mut versions: Vec<u64> = records.iter().map(|r| r.rulebase_version).collect();
    versions.sort_unstable();
    versions.dedup();

    Ok(MetricsReport {
        schema: REPORT_SCHEMA.into(),
        mode: mode_of(records),
        frames: records.len(),
        anomalies: truth.iter().filter(|&&t| t).count(),
        auc,
        precision: pr.precision,
        recall: pr.recall,
        filtering_proportion: filtering,
        coarse_recall: recall_c,
        filtering_valid: recall_c >= recall_target,
        throughput_fps,
        overhead_s,
        wall_s,
        rho_measured,
        t_c,
        t_f,
        modeled_fps,
        static_frames,
        active_frames,
        escalated,
        unverified: records.iter().filter(|r| r.unverified).count(),
        rulebase_versions: versions,
    })
}

/// Run the cascade over a manifest and score the result.
pub fn run_benchmark(
    manifest: &DatasetManifest,
    store: &dyn FrameStore,
    pools: &SharedPool,
    backends: &Backends,
    config: &CascadeConfig,
) -> Result<(MetricsReport, Vec<VerdictRecord>)> {
    if manifest.is_empty() {
        return Err(Error::EmptyInput("empty manifest"));
    }
    manifest.validate()?;
    let (records, stats) = process_stream(&manifest.frames(), store, pools, backends, config)?;
    let mut report = compute_report(manifest, &records, Some(stats.wall_s), config.recall_target)?;
    report.mode = config.mode;
    Ok((report, records))
}

pub fn write_manifest_jsonl(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.4, 0.6, 0.2], &[true, true, false, false]).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
        assert!(matches!(auc(&[0.1], &[true, false]), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn pr_cases() {
        let t = [true, false, true];
        assert_eq!(precision_recall(&t, &t).unwrap(), PrecisionRecall { precision: 1.0, recall: 1.0 });
        let none = precision_recall(&[false; 5], &[true; 5]).unwrap();
        assert_eq!((none.precision, none.recall), (1.0, 0.0));
        // TP=2, FP=1, FN=2
        let pred = [true, true, true, false, false];
        let truth = [true, true, false, true, true];
        let pr = precision_recall(&pred, &truth).unwrap();
        assert!((pr.precision - 2.0 / 3.0).abs() < 1e-15 && (pr.recall - 0.5).abs() < 1e-15);
        assert!(precision_recall(&pred, &truth[..2]).is_err());
    }

    fn manifest(anoms: usize, normals: usize) -> DatasetManifest {
        let entries = (0..anoms + normals)
            .map(|i| {
                let label =
                    u8::from(i % ((anoms + normals) / anoms.max(1)).max(1) == 0 && i / ((anoms + normals) / anoms.max(1)).max(1) < anoms);
                ManifestEntry::new(format!("f{i}"), format!("img/{i}.png"), label, if i % 2 == 0 { "a" } else { "b" }, (i / 2) as u64)
            })
            .collect();
        DatasetManifest::new(entries).unwrap()
    }

    #[test]
    fn duplication_forty_sixty() {
        let m = manifest(40, 60);
        assert_eq!(m.anomalies(), 40);
        let d = duplicate_normals(&m, 0.05).unwrap();
        assert_eq!(d.len(), 800);
        assert_eq!(d.len() - d.anomalies(), 760);
        assert!((d.anomaly_ratio() - 0.05).abs() < 1e-12);
        // anomalies untouched and in order
        let a: Vec<_> = m.entries.iter().filter(|e| e.is_anomaly()).collect();
        let b: Vec<_> = d.entries.iter().filter(|e| e.is_anomaly()).collect();
        assert_eq!(a, b);
        // copies per normal are 12 or 13 (760/60 = 12.67)
        let mut per: HashMap<&str, usize> = HashMap::new();
        for e in d.entries.iter().filter(|e| !e.is_anomaly()) {
            *per.entry(e.path.to_str().unwrap()).or_default() += 1;
        }
        assert!(per.values().all(|&c| c == 12 || c == 13));
        assert_eq!(duplicate_normals(&m, 0.4).unwrap(), m);
        assert!(matches!(duplicate_normals(&m, 0.5), Err(Error::RatioNotReducible { .. })));
        assert!(matches!(duplicate_normals(&m, 0.0), Err(Error::RatioNotReducible { .. })));
    }

    #[test]
    fn manifest_validation() {
        let ok = vec![ManifestEntry::new("a", "a.png", 0, "s", 0), ManifestEntry::new("b", "b.png", 1, "s", 1)];
        assert!(DatasetManifest::new(ok.clone()).is_ok());
        let mut dup = ok.clone();
        dup[1].frame_id = "a".into();
        assert!(DatasetManifest::new(dup).is_err());
        let mut gap = ok.clone();
        gap[1].seq = 3;
        assert!(DatasetManifest::new(gap).is_err());
        let mut label = ok;
        label[0].label = 2;
        assert!(DatasetManifest::new(label).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let m = manifest(5, 15);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        m.save(&p).unwrap();
        let back = DatasetManifest::load(&p).unwrap();
        assert_eq!(back.entries, m.entries);
        assert_eq!(back.base_dir, dir.path());
        assert_eq!(back.disk_store().resolve("f3").unwrap(), dir.path().join("img/3.png"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn auc_matches_pairwise(points in prop::collection::vec((0u8..20, any::<bool>()), 2..200)) {
            let scores: Vec<f64> = points.iter().map(|p| p.0 as f64 / 4.0).collect();
            let labels: Vec<bool> = points.iter().map(|p| p.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            prop_assert!((auc(&scores, &labels).unwrap() - pairwise_auc(&scores, &labels)).abs() < 1e-9);
        }

        #[test]
        fn auc_invariant_under_normal_duplication(points in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..100), k in 2usize..6) {
            let scores: Vec<f64> = points.iter().map(|p| p.0).collect();
            let labels: Vec<bool> = points.iter().map(|p| p.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let base = auc(&scores, &labels).unwrap();
            let (mut s2, mut l2) = (Vec::new(), Vec::new());
            for (s, l) in scores.iter().zip(&labels) {
                for _ in 0..if *l { 1 } else { k } {
                    s2.push(*s);
                    l2.push(*l);
                }
            }
            prop_assert!((auc(&s2, &l2).unwrap() - base).abs() < 1e-9);
        }

        #[test]
        fn duplication_hits_target(anoms in 1usize..60, normals in 1usize..200, target_pm in 5u32..200) {
            let target = target_pm as f64 / 10_000.0 * 5.0;
            let m = manifest(anoms, normals);
            prop_assume!(target < m.anomaly_ratio());
            let d = duplicate_normals(&m, target).unwrap();
            prop_assert!((d.anomaly_ratio() - target).abs() <= RATIO_TOLERANCE);
            prop_assert_eq!(d.anomalies(), m.anomalies());
            d.validate().unwrap();
        }

        #[test]
        fn round_robin_sums(normals in 1usize..300, extra in 0usize..2000) {
            let total = normals + extra;
            let c = round_robin_counts(normals, total);
            prop_assert_eq!(c.iter().sum::<usize>(), total);
            let lo = *c.iter().min().unwrap();
            prop_assert!(c.iter().all(|&x| x == lo || x == lo + 1));
        }
    }
}
