//! Health-score kernel shared by both cascade stages.
//!
//! A query embedding is compared against every candidate in the pool; the
//! `k` most similar candidates contribute `+sim` (normal rules) or `-sim`
//! (perturbed labels, custom anomalies) to the score. Low scores mean the
//! query looks more like the anomaly side of the pool than like the scene's
//! normal rules.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rulebase::Polarity;

const UNIT_TOLERANCE: f64 = 1e-6;

/// An L2-normalized embedding. Construction normalizes, so every value of
/// this type satisfies `|v| = 1` within `1e-6`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::ZeroVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_unit(&self) -> bool {
        let n = self.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        (n - 1.0).abs() <= UNIT_TOLERANCE
    }

    /// Dot product of two unit vectors, i.e. their cosine.
    pub fn dot(&self, other: &EmbeddingVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { left: (self.dim(), 1), right: (other.dim(), 1) });
        }
        Ok(dot(&self.0, &other.0))
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two raw vectors, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch { left: (u.len(), 1), right: (v.len(), 1) });
    }
    let nu2 = dot(u, u);
    let nv2 = dot(v, v);
    if nu2 == 0.0 || nv2 == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(u, v) / (nu2 * nv2).sqrt()).clamp(-1.0, 1.0))
}

/// Indices of the `k` largest similarities, descending, ties by ascending index.
pub fn top_k(sims: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(sims.len());
    if k == 0 {
        return Vec::new();
    }
    let by_rank = |&a: &usize, &b: &usize| -> Ordering { sims[b].total_cmp(&sims[a]).then(a.cmp(&b)) };
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_rank);
        idx.truncate(k);
    }
    idx.sort_unstable_by(by_rank);
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate_id: usize,
    pub sim: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResult {
    pub score: f64,
    pub topk: Vec<ScoredCandidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Normal,
    Abnormal,
}

impl Verdict {
    pub fn is_abnormal(self) -> bool {
        self == Verdict::Abnormal
    }
}

/// Embeddings of every candidate in one space (image-tower text side, or the
/// text embedder), row `i` belonging to candidate id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEmbeddings {
    dim: usize,
    rows: Vec<f64>,
    polarities: Vec<Polarity>,
}

impl PoolEmbeddings {
    pub fn new(embeddings: &[EmbeddingVector], polarities: &[Polarity]) -> Result<Self> {
        if embeddings.len() != polarities.len() {
            return Err(Error::LengthMismatch(embeddings.len(), polarities.len()));
        }
        let Some(first) = embeddings.first() else { return Err(Error::EmptyPool) };
        let dim = first.dim();
        let mut rows = Vec::with_capacity(dim * embeddings.len());
        for e in embeddings {
            if e.dim() != dim {
                return Err(Error::DimensionMismatch { left: (dim, 1), right: (e.dim(), 1) });
            }
            rows.extend_from_slice(e.as_slice());
        }
        Ok(Self { dim, rows, polarities: polarities.to_vec() })
    }

    pub fn len(&self) -> usize {
        self.polarities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polarities.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn polarities(&self) -> &[Polarity] {
        &self.polarities
    }

    /// Similarity of `query` to every candidate.
    pub fn similarities(&self, query: &EmbeddingVector) -> Result<Vec<f64>> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch { left: (query.dim(), 1), right: (self.dim, 1) });
        }
        let q = query.as_slice();
        Ok(self.rows.chunks_exact(self.dim).map(|row| dot(q, row).clamp(-1.0, 1.0)).collect())
    }
}

/// Signed sum of the top-`k` similarities.
pub fn health_score(query: &EmbeddingVector, pool: &PoolEmbeddings, k: usize) -> Result<HealthResult> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if k == 0 {
        return Err(Error::BadParams("k must be >= 1".into()));
    }
    let sims = pool.similarities(query)?;
    Ok(aggregate(&sims, pool.polarities(), k))
}

/// The aggregation step alone, for callers that already have similarities.
pub fn aggregate(sims: &[f64], polarities: &[Polarity], k: usize) -> HealthResult {
    let topk: Vec<ScoredCandidate> =
        top_k(sims, k).into_iter().map(|i| ScoredCandidate { candidate_id: i, sim: sims[i], weight: polarities[i].weight() }).collect();
    // Normal and anomaly sides are summed separately, each in rank order.
    let side = |w: f64| topk.iter().filter(|c| c.weight == w).map(|c| c.sim).sum::<f64>();
    let score = side(1.0) - side(-1.0);
    HealthResult { score, topk }
}

/// Abnormal iff the score falls strictly below `tau`.
pub fn classify(score: f64, tau: f64) -> Verdict {
    if score < tau {
        Verdict::Abnormal
    } else {
        Verdict::Normal
    }
}

pub const MIN_CALIBRATION_SCORES: usize = 20;

/// Threshold such that at least `target_pass_rate` of the calibration
/// normals score `>= tau`: the lower `(1 - target)`-quantile.
pub fn calibrate_tau(normal_scores: &[f64], target_pass_rate: f64) -> Result<f64> {
    if normal_scores.len() < MIN_CALIBRATION_SCORES || !(target_pass_rate > 0.0 && target_pass_rate < 1.0) {
        return Err(Error::InsufficientCalibrationData { needed: MIN_CALIBRATION_SCORES, got: normal_scores.len() });
    }
    if normal_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut sorted = normal_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let q = 1.0 - target_pass_rate;
    // Lower interpolation; the epsilon absorbs rounding that lands just below an integer index.
    let idx = ((q * (n - 1) as f64) + 1e-9).floor() as usize;
    Ok(sorted[idx.min(n - 1)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    fn oracle_top_k(sims: &[f64], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..sims.len()).collect();
        idx.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn cosine_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let u: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (mut d, mut a, mut b) = (0.0, 0.0, 0.0);
            for i in 0..16 {
                d += u[i] * v[i];
                a += u[i] * u[i];
                b += v[i] * v[i];
            }
            assert!((cosine(&u, &v).unwrap() - d / (a.sqrt() * b.sqrt())).abs() < 1e-9);
        }
    }

    #[test]
    fn embedding_rejects_bad_input() {
        assert!(matches!(EmbeddingVector::new(vec![0.0; 3]), Err(Error::ZeroVector)));
        assert!(matches!(EmbeddingVector::new(vec![f64::NAN, 1.0]), Err(Error::NonFinite)));
        assert!(unit(&[3.0, 4.0]).is_unit());
    }

    #[test]
    fn top_k_cases() {
        assert_eq!(top_k(&[0.1, 0.9, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k(&[0.5, 0.5, 0.5], 2), vec![0, 1]);
        assert_eq!(top_k(&[0.2], 5), vec![0]);
    }

    #[test]
    fn top_k_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sims: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_eq!(top_k(&sims, 5), oracle_top_k(&sims, 5));
    }

    #[test]
    fn hand_expanded_health_score() {
        // top-3: normal 0.8, perturbed 0.7, normal 0.6
        let sims = [0.6, 0.1, 0.7, 0.8];
        let pol = [Polarity::Normal, Polarity::Anomalous, Polarity::Anomalous, Polarity::Normal];
        let r = aggregate(&sims, &pol, 3);
        assert_eq!(r.score, 0.7);
        assert_eq!(r.topk.iter().map(|c| c.candidate_id).collect::<Vec<_>>(), vec![3, 2, 0]);
    }

    #[test]
    fn pool_smaller_than_k_truncates() {
        let q = unit(&[1.0, 0.0]);
        let c = unit(&[0.9, (1.0f64 - 0.81).sqrt()]);
        let pool = PoolEmbeddings::new(&[c], &[Polarity::Anomalous]).unwrap();
        let r = health_score(&q, &pool, 5).unwrap();
        assert_eq!(r.topk.len(), 1);
        assert!((r.score + 0.9).abs() < 1e-12);
    }

    #[test]
    fn all_normal_nonnegative_topk_gives_nonnegative_score() {
        let r = aggregate(&[0.3, 0.0, 0.9], &[Polarity::Normal; 3], 2);
        assert!(r.score >= 0.0);
    }

    #[test]
    fn classify_is_strict() {
        assert_eq!(classify(-0.2, 0.0), Verdict::Abnormal);
        assert_eq!(classify(0.0, 0.0), Verdict::Normal);
    }

    #[test]
    fn classify_sweep_flips_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s: f64 = rng.random_range(-2.0..2.0);
            let taus: Vec<f64> = (0..=80).map(|i| -2.0 + i as f64 * 0.05).collect();
            let verdicts: Vec<Verdict> = taus.iter().map(|&t| classify(s, t)).collect();
            let flips = verdicts.windows(2).filter(|w| w[0] != w[1]).count();
            assert!(flips <= 1);
            if let Some(pos) = verdicts.iter().position(|v| v.is_abnormal()) {
                assert!(taus[pos] > s);
                assert!(verdicts[pos..].iter().all(|v| v.is_abnormal()));
            }
        }
    }

    #[test]
    fn calibration_quantiles() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(calibrate_tau(&scores, 0.95).unwrap(), 5.0);
        assert_eq!(calibrate_tau(&[0.3; 25], 0.9).unwrap(), 0.3);
        let sym: Vec<f64> = (-10..=10).map(f64::from).collect();
        assert_eq!(calibrate_tau(&sym, 0.5).unwrap(), 0.0);
        assert!(matches!(calibrate_tau(&scores[..10], 0.9), Err(Error::InsufficientCalibrationData { .. })));
        assert!(calibrate_tau(&scores, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn calibrated_tau_passes_target(scores in prop::collection::vec(-5.0f64..5.0, 20..200), target in 0.05f64..0.95) {
            let tau = calibrate_tau(&scores, target).unwrap();
            let pass = scores.iter().filter(|&&s| classify(s, tau) == Verdict::Normal).count();
            prop_assert!(pass as f64 >= target * scores.len() as f64 - 1e-9);
        }

        #[test]
        fn ranking_is_scale_invariant(
            raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 2..30),
            q in prop::collection::vec(-1.0f64..1.0, 6),
            scale in 0.01f64..100.0,
        ) {
            prop_assume!(q.iter().any(|v| v.abs() > 1e-3) && raw.iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)));
            let pol: Vec<Polarity> = (0..raw.len()).map(|i| if i % 3 == 0 { Polarity::Normal } else { Polarity::Anomalous }).collect();
            let embed = |s: f64| -> (EmbeddingVector, PoolEmbeddings) {
                let rows: Vec<EmbeddingVector> = raw.iter().map(|r| unit(&r.iter().map(|v| v * s).collect::<Vec<_>>())).collect();
                (unit(&q.iter().map(|v| v * s).collect::<Vec<_>>()), PoolEmbeddings::new(&rows, &pol).unwrap())
            };
            let (q1, p1) = embed(1.0);
            let (q2, p2) = embed(scale);
            let a = health_score(&q1, &p1, 5).unwrap();
            let b = health_score(&q2, &p2, 5).unwrap();
            let ids = |r: &HealthResult| r.topk.iter().map(|c| c.candidate_id).collect::<Vec<_>>();
            prop_assert_eq!(ids(&a), ids(&b));
            prop_assert!((a.score - b.score).abs() < 1e-9);
        }

        #[test]
        fn raising_tau_never_clears(s in -3.0f64..3.0, t1 in -3.0f64..3.0, dt in 0.0f64..2.0) {
            if classify(s, t1).is_abnormal() {
                prop_assert!(classify(s, t1 + dt).is_abnormal());
            }
        }
    }
}
