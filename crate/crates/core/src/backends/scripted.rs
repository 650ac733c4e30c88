use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Mutex;

use super::{Captioner, ImageEmbedder, ImageInput, MockBackend, RuleGeneralizer, TextEmbedder};
use crate::error::{Error, Result};
use crate::scoring::EmbeddingVector;

/// Fixture-table backend: frame ids and texts map to fixed outputs.
///
/// Unknown texts fall back to a [`MockBackend`] of the same dimension so
/// that templated pool sentences need not all be listed. Unknown frames
/// are an error unless `with_image_fallback` is set.
#[derive(Debug)]
pub struct ScriptedBackend {
    dim: usize,
    model: String,
    text_vectors: HashMap<String, EmbeddingVector>,
    frame_vectors: HashMap<String, EmbeddingVector>,
    captions: HashMap<String, String>,
    failing_frames: HashSet<String>,
    rule_responses: Mutex<VecDeque<String>>,
    default_rule_response: Option<String>,
    fallback: MockBackend,
    image_fallback: bool,
    multi_image: bool,
}

impl Clone for ScriptedBackend {
    fn clone(&self) -> Self {
        Self {
            dim: self.dim,
            model: self.model.clone(),
            text_vectors: self.text_vectors.clone(),
            frame_vectors: self.frame_vectors.clone(),
            captions: self.captions.clone(),
            failing_frames: self.failing_frames.clone(),
            rule_responses: Mutex::new(self.rule_responses.lock().expect("poisoned").clone()),
            default_rule_response: self.default_rule_response.clone(),
            fallback: self.fallback.clone(),
            image_fallback: self.image_fallback,
            multi_image: self.multi_image,
        }
    }
}

impl ScriptedBackend {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            model: format!("scripted-{dim}d"),
            text_vectors: HashMap::new(),
            frame_vectors: HashMap::new(),
            captions: HashMap::new(),
            failing_frames: HashSet::new(),
            rule_responses: Mutex::new(VecDeque::new()),
            default_rule_response: None,
            fallback: MockBackend::new(0x5C_21_97_ED, dim),
            image_fallback: false,
            multi_image: false,
        }
    }

    pub fn with_fallback_seed(mut self, seed: u64) -> Self {
        self.fallback = MockBackend::new(seed, self.dim);
        self
    }

    pub fn with_image_fallback(mut self) -> Self {
        self.image_fallback = true;
        self
    }

    pub fn with_multi_image(mut self) -> Self {
        self.multi_image = true;
        self
    }

    pub fn with_text(mut self, text: impl Into<String>, v: EmbeddingVector) -> Self {
        self.text_vectors.insert(text.into(), v);
        self
    }

    pub fn with_frame(mut self, frame_id: impl Into<String>, v: EmbeddingVector) -> Self {
        self.frame_vectors.insert(frame_id.into(), v);
        self
    }

    pub fn with_caption(mut self, frame_id: impl Into<String>, caption: impl Into<String>) -> Self {
        self.captions.insert(frame_id.into(), caption.into());
        self
    }

    pub fn with_failing_frame(mut self, frame_id: impl Into<String>) -> Self {
        self.failing_frames.insert(frame_id.into());
        self
    }

    /// Queue a generalizer response; queued responses are served first, then the default.
    pub fn with_rule_response(self, response: impl Into<String>) -> Self {
        self.rule_responses.lock().expect("poisoned").push_back(response.into());
        self
    }

    pub fn with_default_rule_response(mut self, response: impl Into<String>) -> Self {
        self.default_rule_response = Some(response.into());
        self
    }

    pub fn insert_text(&mut self, text: impl Into<String>, v: EmbeddingVector) {
        self.text_vectors.insert(text.into(), v);
    }

    pub fn insert_frame(&mut self, frame_id: impl Into<String>, v: EmbeddingVector) {
        self.frame_vectors.insert(frame_id.into(), v);
    }

    pub fn insert_caption(&mut self, frame_id: impl Into<String>, caption: impl Into<String>) {
        self.captions.insert(frame_id.into(), caption.into());
    }

    pub fn text_vector(&self, text: &str) -> EmbeddingVector {
        self.text_vectors.get(text).cloned().unwrap_or_else(|| self.fallback.text_vector(text))
    }

    fn check_failure(&self, frame_id: &str) -> Result<()> {
        if self.failing_frames.contains(frame_id) {
            return Err(Error::BackendUnavailable(format!("injected failure for frame {frame_id}")));
        }
        Ok(())
    }
}

impl TextEmbedder for ScriptedBackend {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| self.text_vector(t)).collect())
    }
}

impl ImageEmbedder for ScriptedBackend {
    fn embed_image(&self, input: &ImageInput<'_>) -> Result<EmbeddingVector> {
        self.check_failure(input.frame_id)?;
        match self.frame_vectors.get(input.frame_id) {
            Some(v) => Ok(v.clone()),
            None if self.image_fallback => Ok(self.fallback.image_vector(input.image)),
            None => Err(Error::MalformedResponse(format!("no fixture vector for frame {}", input.frame_id))),
        }
    }
}

impl Captioner for ScriptedBackend {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn caption(&self, frames: &[ImageInput<'_>], prompt: &str) -> Result<String> {
        let mut out = Vec::new();
        for f in frames {
            self.check_failure(f.frame_id)?;
            match self.captions.get(f.frame_id) {
                Some(c) => out.push(c.clone()),
                None => out.push(self.fallback.caption(std::slice::from_ref(f), prompt)?),
            }
        }
        Ok(out.join(" "))
    }

    fn supports_multi_image(&self) -> bool {
        self.multi_image
    }
}

impl RuleGeneralizer for ScriptedBackend {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete_rules(&self, prompt: &str, documents: &[String]) -> Result<String> {
        if let Some(r) = self.rule_responses.lock().expect("poisoned").pop_front() {
            return Ok(r);
        }
        match &self.default_rule_response {
            Some(r) => Ok(r.clone()),
            None => self.fallback.complete_rules(prompt, documents),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    #[test]
    fn fixture_vector_returned_exactly() {
        let v = EmbeddingVector::new(vec![0.6, 0.8, 0.0]).unwrap();
        let s = ScriptedBackend::new(3).with_frame("f7", v.clone());
        let img = RgbImage::new(2, 2);
        assert_eq!(s.embed_image(&ImageInput::new("f7", &img)).unwrap(), v);
        assert!(s.embed_image(&ImageInput::new("f8", &img)).is_err());
    }

    #[test]
    fn rule_responses_served_in_order() {
        let s = ScriptedBackend::new(3).with_rule_response("- a").with_default_rule_response("- z");
        assert_eq!(s.complete_rules("p", &[]).unwrap(), "- a");
        assert_eq!(s.complete_rules("p", &[]).unwrap(), "- z");
    }

    #[test]
    fn injected_caption_failure() {
        let s = ScriptedBackend::new(3).with_failing_frame("bad");
        let img = RgbImage::new(2, 2);
        assert!(matches!(s.caption(&[ImageInput::new("bad", &img)], "p"), Err(Error::BackendUnavailable(_))));
    }
}
