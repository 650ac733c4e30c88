//! Synthetic scenes with engineered embeddings.
//!
//! Every pool sentence, frame and caption gets a scripted vector. Normal
//! rules are basis directions; a few perturbed labels act as anomaly
//! prototypes. Normal frames point at a rule, anomalies at a prototype.
//! Coarse (image) vectors are noisier than caption vectors and some normal
//! frames lean towards a prototype, so stage 1 raises false alarms that
//! stage 2 clears. Frames move a bright square unless marked static, in
//! which case they repeat their predecessor's pixels.

use std::sync::Arc;
use std::time::Duration;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backends::{Backends, Instrumented, ScriptedBackend};
use crate::error::Result;
use crate::eval::{DatasetManifest, ManifestEntry};
use crate::frames::{FrameMeta, MemoryFrames};
use crate::rulebase::{build_candidate_pool, default_perturbed_labels, CandidateOrigin, Params, Rule, RuleBase, RuleSource};
use crate::scoring::EmbeddingVector;

pub const NORMAL_RULES: [&str; 6] = [
    "pedestrians walk along the sidewalk",
    "cyclists ride in the bike lane",
    "people sit on the benches",
    "people wait at the crosswalk",
    "a person walks a dog on a leash",
    "people carry shopping bags",
];

/// Rule text an operator would add to catch the lingering frames.
pub const LINGER_RULE: &str = "a person lingering near the entrance";

const PROTOTYPES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    pub anomaly_fraction: f64,
    /// Fraction of normal frames that repeat their predecessor.
    pub static_fraction: f64,
    pub dim: usize,
    pub coarse_noise: f64,
    pub fine_noise: f64,
    /// Normal frames lean towards a prototype by `ambiguity * u^2`, `u`
    /// uniform in `[0, 1)`; above about 1 stage 1 flags them.
    pub ambiguity: f64,
    /// Anomalies whose captions look normal until [`LINGER_RULE`] exists.
    pub lingering: usize,
    /// Place anomalies at evenly spaced positions instead of at random.
    pub even_spacing: bool,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 500,
            anomaly_fraction: 0.1,
            static_fraction: 0.4,
            dim: 64,
            coarse_noise: 0.35,
            fine_noise: 0.1,
            ambiguity: 2.4,
            lingering: 0,
            even_spacing: false,
            width: 64,
            height: 48,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Normal,
    Anomaly,
    Lingering,
}

impl FrameKind {
    pub fn is_anomaly(self) -> bool {
        self != FrameKind::Normal
    }
}

#[derive(Debug)]
pub struct Scenario {
    pub config: SynthConfig,
    pub rulebase: RuleBase,
    pub frames: Vec<FrameMeta>,
    pub kinds: Vec<FrameKind>,
    pub store: MemoryFrames,
    /// Scripted vectors for every pool sentence, frame and caption,
    /// including the sentence that [`LINGER_RULE`] expands to.
    pub backend: ScriptedBackend,
    images: Vec<RgbImage>,
}

fn basis(dim: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, from: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for x in &mut v[from..] {
        *x = rng.sample(StandardNormal);
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn mix(parts: &[(f64, &[f64])]) -> EmbeddingVector {
    let dim = parts[0].1.len();
    let mut v = vec![0.0; dim];
    for (w, p) in parts {
        for (a, b) in v.iter_mut().zip(p.iter()) {
            *a += w * b;
        }
    }
    EmbeddingVector::new(v).expect("synthetic vector is non-zero")
}

impl Scenario {
    pub fn generate(config: SynthConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dim = config.dim.max(NORMAL_RULES.len() + PROTOTYPES + 4);
        let linger_dir = basis(dim, NORMAL_RULES.len() + PROTOTYPES);
        let noise_from = NORMAL_RULES.len() + PROTOTYPES + 1;

        let rules = NORMAL_RULES.iter().map(|t| Rule::new(*t, RuleSource::Induced, 1)).collect::<Result<Vec<_>>>()?;
        let rulebase = RuleBase::new(Params::default(), rules, default_perturbed_labels())?;
        let pool = build_candidate_pool(&rulebase)?;

        let mut backend = ScriptedBackend::new(dim).with_fallback_seed(config.seed);
        let mut label_no = 0;
        for c in &pool.candidates {
            let v = match c.origin {
                CandidateOrigin::NormalRule => basis(dim, c.id),
                _ if label_no < PROTOTYPES => {
                    label_no += 1;
                    basis(dim, NORMAL_RULES.len() + label_no - 1)
                }
                _ => gaussian(&mut rng, dim, noise_from),
            };
            backend.insert_text(c.text.clone(), EmbeddingVector::new(v)?);
        }
        backend.insert_text(format!("The scene depicts {LINGER_RULE}."), EmbeddingVector::new(linger_dir.clone())?);

        let n = config.frames;
        let mut kinds = vec![FrameKind::Normal; n];
        let n_anom = ((n as f64) * config.anomaly_fraction).round() as usize;
        let positions: Vec<usize> = if config.even_spacing {
            (0..n).filter(|&i| ((i + 1) as f64 * config.anomaly_fraction).floor() > (i as f64 * config.anomaly_fraction).floor()).collect()
        } else {
            let mut idx: Vec<usize> = (1..n).collect();
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            idx.truncate(n_anom.min(n.saturating_sub(1)));
            idx.sort_unstable();
            idx
        };
        for (j, &p) in positions.iter().enumerate() {
            kinds[p] = if j < config.lingering { FrameKind::Lingering } else { FrameKind::Anomaly };
        }

        let (w, h) = (config.width, config.height);
        let mut store = MemoryFrames::new();
        let mut frames = Vec::with_capacity(n);
        let mut images: Vec<RgbImage> = Vec::with_capacity(n);
        for (i, &kind) in kinds.iter().enumerate() {
            let id = format!("syn-{i:05}");
            let is_static = i > 0 && kind == FrameKind::Normal && rng.random::<f64>() < config.static_fraction;
            let img = if is_static {
                images[i - 1].clone()
            } else {
                let mut img = RgbImage::from_pixel(w, h, Rgb([30, 30, 30]));
                let side = (w.min(h) / 5).max(4);
                let x0 = (i as u32 * 7) % (w - side);
                let y0 = (i as u32 * 3) % (h - side);
                let shade = if kind.is_anomaly() { [240, 200, 40] } else { [200, 200, 200] };
                for y in y0..y0 + side {
                    for x in x0..x0 + side {
                        img.put_pixel(x, y, Rgb(shade));
                    }
                }
                img
            };

            let r = rng.random_range(0..NORMAL_RULES.len());
            let p = rng.random_range(0..PROTOTYPES);
            let rule = basis(dim, r);
            let proto = basis(dim, NORMAL_RULES.len() + p);
            let coarse_n = gaussian(&mut rng, dim, 0);
            let fine_n = gaussian(&mut rng, dim, 0);
            let (coarse, fine) = match kind {
                FrameKind::Normal => {
                    let lean = rng.random::<f64>().powi(2) * config.ambiguity;
                    (
                        mix(&[(1.0, &rule), (lean, &proto), (config.coarse_noise, &coarse_n)]),
                        mix(&[(1.0, &rule), (0.1 * lean, &proto), (config.fine_noise, &fine_n)]),
                    )
                }
                FrameKind::Anomaly => {
                    let lean = rng.random::<f64>() * 0.8;
                    (
                        mix(&[(1.0, &proto), (lean, &rule), (config.coarse_noise, &coarse_n)]),
                        mix(&[(1.0, &proto), (config.fine_noise, &fine_n)]),
                    )
                }
                FrameKind::Lingering => (
                    mix(&[(1.0, &proto), (0.3, &rule), (config.coarse_noise, &coarse_n)]),
                    mix(&[(1.0, &linger_dir), (0.5, &rule), (config.fine_noise, &fine_n)]),
                ),
            };
            let caption = format!(
                "{id}: {}",
                match kind {
                    FrameKind::Normal => NORMAL_RULES[r],
                    FrameKind::Anomaly => "someone behaving unusually",
                    FrameKind::Lingering => "a person standing by the door",
                }
            );
            backend.insert_frame(id.clone(), coarse);
            backend.insert_caption(id.clone(), caption.clone());
            backend.insert_text(caption, fine);
            store.insert(id.clone(), img.clone());
            images.push(img);
            frames.push(FrameMeta::new(id, "synthetic", i as u64));
        }
        Ok(Self { config, rulebase, frames, kinds, store, backend, images })
    }

    pub fn labels(&self) -> Vec<bool> {
        self.kinds.iter().map(|k| k.is_anomaly()).collect()
    }

    pub fn manifest_entries(&self) -> Vec<ManifestEntry> {
        self.frames
            .iter()
            .zip(&self.kinds)
            .map(|(f, k)| {
                ManifestEntry::new(
                    f.frame_id.clone(),
                    format!("frames/{}.png", f.frame_id),
                    u8::from(k.is_anomaly()),
                    f.scene.clone(),
                    f.seq,
                )
            })
            .collect()
    }

    /// Manifest whose paths point at `dir/frames/*.png`, written there with
    /// [`Scenario::write_frames`].
    pub fn manifest(&self) -> Result<DatasetManifest> {
        DatasetManifest::new(self.manifest_entries())
    }

    pub fn write_frames(&self, dir: &std::path::Path) -> Result<()> {
        let frames_dir = dir.join("frames");
        std::fs::create_dir_all(&frames_dir).map_err(|e| crate::error::Error::io(&frames_dir, e))?;
        for (f, img) in self.frames.iter().zip(&self.images) {
            img.save(frames_dir.join(format!("{}.png", f.frame_id)))?;
        }
        Ok(())
    }

    /// All four roles backed by the scripted fixture, without latency.
    pub fn backends(&self) -> Backends {
        let b = Arc::new(self.backend.clone());
        Backends { image_embedder: b.clone(), text_embedder: b.clone(), captioner: b.clone(), rule_llm: b }
    }

    /// Backends with fixed per-call latency on the image embedder and the
    /// captioner, plus handles to their call counters.
    pub fn timed_backends(&self, coarse: Duration, fine: Duration) -> TimedBackends {
        let shared = Arc::new(self.backend.clone());
        let image = Arc::new(Instrumented::new(shared.clone(), coarse));
        let captioner = Arc::new(Instrumented::new(shared.clone(), fine));
        TimedBackends {
            backends: Backends {
                image_embedder: image.clone(),
                text_embedder: shared.clone(),
                captioner: captioner.clone(),
                rule_llm: shared,
            },
            image,
            captioner,
        }
    }
}

pub struct TimedBackends {
    pub backends: Backends,
    pub image: Arc<Instrumented<Arc<ScriptedBackend>>>,
    pub captioner: Arc<Instrumented<Arc<ScriptedBackend>>>,
}
