use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{Captioner, ImageEmbedder, ImageInput, RuleGeneralizer, TextEmbedder};
use crate::error::Result;
use crate::scoring::EmbeddingVector;

/// Deterministic stand-in for every backend role.
///
/// Embeddings are a pure function of `(seed, input bytes)`: the SHA-256 of
/// both seeds a ChaCha stream whose Gaussian draws are normalized to a unit
/// vector. Text and image inputs hash under different domain tags, so a
/// text never collides with an image by construction.
#[derive(Debug, Clone)]
pub struct MockBackend {
    seed: u64,
    dim: usize,
    model: String,
}

impl MockBackend {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim: dim.max(1), model: format!("mock-{dim}d-s{seed}") }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn digest(&self, domain: &[u8], parts: &[&[u8]]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(domain);
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        h.finalize().into()
    }

    fn vector(&self, digest: [u8; 32]) -> EmbeddingVector {
        let mut rng = ChaCha8Rng::from_seed(digest);
        loop {
            let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            if let Ok(e) = EmbeddingVector::new(v) {
                return e;
            }
        }
    }

    pub fn text_vector(&self, text: &str) -> EmbeddingVector {
        self.vector(self.digest(b"text", &[text.as_bytes()]))
    }

    pub fn image_vector(&self, image: &image::RgbImage) -> EmbeddingVector {
        let dims = [image.width().to_le_bytes(), image.height().to_le_bytes()].concat();
        self.vector(self.digest(b"image", &[&dims, image.as_raw()]))
    }
}

impl TextEmbedder for MockBackend {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| self.text_vector(t)).collect())
    }
}

impl ImageEmbedder for MockBackend {
    fn embed_image(&self, input: &ImageInput<'_>) -> Result<EmbeddingVector> {
        Ok(self.image_vector(input.image))
    }
}

impl Captioner for MockBackend {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn caption(&self, frames: &[ImageInput<'_>], prompt: &str) -> Result<String> {
        let mut parts: Vec<&[u8]> = vec![prompt.as_bytes()];
        parts.extend(frames.iter().map(|f| f.image.as_raw().as_slice()));
        let d = self.digest(b"caption", &parts);
        Ok(format!("{} moving subject(s); scene digest {}", d[0] % 4 + 1, hex::encode(&d[..6])))
    }

    fn supports_multi_image(&self) -> bool {
        true
    }
}

impl RuleGeneralizer for MockBackend {
    fn model_id(&self) -> &str {
        &self.model
    }

    /// One bullet per distinct document, in first-seen order.
    fn complete_rules(&self, _prompt: &str, documents: &[String]) -> Result<String> {
        let mut seen = std::collections::HashSet::new();
        let lines: Vec<String> = documents
            .iter()
            .map(|d| d.trim())
            .filter(|d| !d.is_empty() && seen.insert(d.to_lowercase()))
            .map(|d| format!("- {d}"))
            .collect();
        Ok(lines.join("\n"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    #[test]
    fn same_text_same_vector() {
        let m = MockBackend::new(3, 16);
        let v = m.embed_texts(&["walk".into(), "walk".into(), "run".into()]).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v[0], v[1]);
        assert_ne!(v[0], v[2]);
        assert!(v.iter().all(|e| e.dim() == 16 && e.is_unit()));
    }

    #[test]
    fn seed_changes_vectors() {
        assert_ne!(MockBackend::new(1, 8).text_vector("a"), MockBackend::new(2, 8).text_vector("a"));
    }

    #[test]
    fn overlay_changes_image_embedding() {
        let m = MockBackend::new(0, 8);
        let plain = RgbImage::from_pixel(8, 8, Rgb([10, 10, 10]));
        let mut marked = plain.clone();
        marked.put_pixel(3, 3, Rgb([255, 0, 0]));
        let a = m.embed_image(&ImageInput::new("f", &plain)).unwrap();
        assert_eq!(a, m.embed_image(&ImageInput::new("g", &plain.clone())).unwrap());
        assert_ne!(a, m.embed_image(&ImageInput::new("f", &marked)).unwrap());
    }

    #[test]
    fn captions_and_rules_are_stable() {
        let m = MockBackend::new(0, 8);
        let img = RgbImage::new(4, 4);
        let c1 = m.caption(&[ImageInput::new("f", &img)], "p").unwrap();
        let c2 = MockBackend::new(0, 8).caption(&[ImageInput::new("f", &img)], "p").unwrap();
        assert_eq!(c1, c2);
        let docs = vec!["a".to_string(), "A".into(), "b".into()];
        assert_eq!(m.complete_rules("p", &docs).unwrap(), "- a\n- b");
    }
}
