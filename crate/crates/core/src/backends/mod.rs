//! Interfaces to the external model services.
//!
//! Four roles: an image embedder (a CLIP-style model that also embeds text
//! into the same space), a text embedder, a captioner and a rule generalizer.
//! Each role is a trait so tests and benchmarks can swap in [`MockBackend`]
//! or [`ScriptedBackend`]; production uses [`OpenAiClient`].
//!
//! The free functions in this module ([`embed_texts`], [`embed_image`],
//! [`caption_frame`], [`complete_rules`]) wrap the trait calls and enforce
//! the response contracts (counts, dimensions, non-empty captions).

mod cache;
mod config;
mod http;
mod mock;
mod scripted;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use image::RgbImage;

pub use cache::{CacheKey, CachedEmbedder};
pub use config::{BackendConfig, BackendKind, BackendRole, BackendsConfig};
pub use http::OpenAiClient;
pub use mock::MockBackend;
pub use scripted::ScriptedBackend;

use crate::error::{Error, Result};
use crate::scoring::EmbeddingVector;

/// Verbatim prompt used for segment descriptions and stage-2 captions.
pub const DESCRIBE_PROMPT: &str =
    "How many moving subjects (e.g., people, animals, vehicles) are in the scene, and what is each one doing in this specific scenario?";

/// Verbatim prompt used to generalize descriptions into normal rules.
pub const RULE_PROMPT: &str = "Based on the following list of observed activities, summarize the general rules that define normal behavior in this scene. Focus on consistent actions, interactions, and locations.";

/// A frame handed to a backend: its id and the pixels to send.
#[derive(Debug, Clone, Copy)]
pub struct ImageInput<'a> {
    pub frame_id: &'a str,
    pub image: &'a RgbImage,
}

impl<'a> ImageInput<'a> {
    pub fn new(frame_id: &'a str, image: &'a RgbImage) -> Self {
        Self { frame_id, image }
    }
}

pub trait TextEmbedder: Send + Sync {
    fn model_id(&self) -> &str;
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

/// Embeds images and texts into one shared space.
pub trait ImageEmbedder: TextEmbedder {
    fn embed_image(&self, input: &ImageInput<'_>) -> Result<EmbeddingVector>;
}

pub trait Captioner: Send + Sync {
    fn model_id(&self) -> &str;
    fn caption(&self, frames: &[ImageInput<'_>], prompt: &str) -> Result<String>;
    /// Whether one request may carry several frames.
    fn supports_multi_image(&self) -> bool {
        false
    }
}

pub trait RuleGeneralizer: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete_rules(&self, prompt: &str, documents: &[String]) -> Result<String>;
}

macro_rules! forward_through_pointer {
    ($($ptr:ident),*) => {$(
        impl<T: TextEmbedder + ?Sized> TextEmbedder for $ptr<T> {
            fn model_id(&self) -> &str { (**self).model_id() }
            fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> { (**self).embed_texts(texts) }
        }
        impl<T: ImageEmbedder + ?Sized> ImageEmbedder for $ptr<T> {
            fn embed_image(&self, input: &ImageInput<'_>) -> Result<EmbeddingVector> { (**self).embed_image(input) }
        }
        impl<T: Captioner + ?Sized> Captioner for $ptr<T> {
            fn model_id(&self) -> &str { (**self).model_id() }
            fn caption(&self, frames: &[ImageInput<'_>], prompt: &str) -> Result<String> { (**self).caption(frames, prompt) }
            fn supports_multi_image(&self) -> bool { (**self).supports_multi_image() }
        }
        impl<T: RuleGeneralizer + ?Sized> RuleGeneralizer for $ptr<T> {
            fn model_id(&self) -> &str { (**self).model_id() }
            fn complete_rules(&self, prompt: &str, documents: &[String]) -> Result<String> { (**self).complete_rules(prompt, documents) }
        }
    )*};
}

forward_through_pointer!(Arc, Box);

/// Embed a batch of texts; one unit vector per text, in order.
pub fn embed_texts<E: TextEmbedder + ?Sized>(backend: &E, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
    if texts.is_empty() {
        return Err(Error::EmptyInput("embedding batch"));
    }
    let out = backend.embed_texts(texts)?;
    if out.len() != texts.len() {
        return Err(Error::MalformedResponse(format!("{} embeddings for {} inputs", out.len(), texts.len())));
    }
    let dim = out[0].dim();
    if out.iter().any(|v| v.dim() != dim) {
        return Err(Error::MalformedResponse("embeddings with inconsistent dimensions".into()));
    }
    Ok(out)
}

pub fn embed_image<E: ImageEmbedder + ?Sized>(backend: &E, input: &ImageInput<'_>) -> Result<EmbeddingVector> {
    backend.embed_image(input)
}

/// Caption one frame or a segment of frames with `prompt`.
pub fn caption_frame<C: Captioner + ?Sized>(backend: &C, frames: &[ImageInput<'_>], prompt: &str) -> Result<String> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("caption request without frames"));
    }
    let caption = backend.caption(frames, prompt)?;
    let caption = caption.trim();
    if caption.is_empty() {
        return Err(Error::EmptyCaption);
    }
    Ok(caption.to_string())
}

pub fn complete_rules<G: RuleGeneralizer + ?Sized>(backend: &G, prompt: &str, documents: &[String]) -> Result<String> {
    let text = backend.complete_rules(prompt, documents)?;
    if text.trim().is_empty() {
        return Err(Error::MalformedResponse("empty completion".into()));
    }
    Ok(text)
}

/// Wraps a backend with a fixed injected latency and a call counter.
#[derive(Debug)]
pub struct Instrumented<B> {
    inner: B,
    latency: Duration,
    calls: AtomicU64,
}

impl<B> Instrumented<B> {
    pub fn new(inner: B, latency: Duration) -> Self {
        Self { inner, latency, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn enter(&self) {
        self.calls.fetch_add(1, Ordering::Relaxed);
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
    }
}

impl<B: TextEmbedder> TextEmbedder for Instrumented<B> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        self.enter();
        self.inner.embed_texts(texts)
    }
}

impl<B: ImageEmbedder> ImageEmbedder for Instrumented<B> {
    fn embed_image(&self, input: &ImageInput<'_>) -> Result<EmbeddingVector> {
        self.enter();
        self.inner.embed_image(input)
    }
}

impl<B: Captioner> Captioner for Instrumented<B> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
    fn caption(&self, frames: &[ImageInput<'_>], prompt: &str) -> Result<String> {
        self.enter();
        self.inner.caption(frames, prompt)
    }
    fn supports_multi_image(&self) -> bool {
        self.inner.supports_multi_image()
    }
}

impl<B: RuleGeneralizer> RuleGeneralizer for Instrumented<B> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
    fn complete_rules(&self, prompt: &str, documents: &[String]) -> Result<String> {
        self.enter();
        self.inner.complete_rules(prompt, documents)
    }
}

/// One handle per role.
#[derive(Clone)]
pub struct Backends {
    pub image_embedder: Arc<dyn ImageEmbedder>,
    pub text_embedder: Arc<dyn TextEmbedder>,
    pub captioner: Arc<dyn Captioner>,
    pub rule_llm: Arc<dyn RuleGeneralizer>,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("image_embedder", &self.image_embedder.model_id())
            .field("text_embedder", &self.text_embedder.model_id())
            .field("captioner", &self.captioner.model_id())
            .field("rule_llm", &self.rule_llm.model_id())
            .finish()
    }
}

impl Backends {
    /// Deterministic offline backends for every role.
    pub fn mock(seed: u64, dim: usize) -> Self {
        let m = Arc::new(MockBackend::new(seed, dim));
        Self { image_embedder: m.clone(), text_embedder: m.clone(), captioner: m.clone(), rule_llm: m }
    }

    pub fn from_config(config: &BackendsConfig) -> Result<Self> {
        config.build()
    }
}
