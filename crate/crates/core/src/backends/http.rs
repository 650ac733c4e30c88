//! OpenAI-compatible HTTP client.
//!
//! Text embeddings go to `POST {url}/v1/embeddings` with `{model, input: [..]}`.
//! Image embeddings use the same endpoint with `input: [{type: "image_b64", data}]`.
//! Captions and rule generalization go to `POST {url}/v1/chat/completions`,
//! images attached as base64 PNG data URLs.

use std::io::Cursor;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::RgbImage;
use serde::Deserialize;
use serde_json::{json, Value};

use super::config::BackendConfig;
use super::{Captioner, ImageEmbedder, ImageInput, RuleGeneralizer, TextEmbedder};
use crate::error::{Error, Result};
use crate::scoring::EmbeddingVector;

const RETRIES: u32 = 2;
const BACKOFF_BASE: Duration = Duration::from_millis(100);

/// Counting semaphore capping concurrent requests.
#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self { permits: Mutex::new(permits.max(1)), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().expect("semaphore poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("semaphore poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.freed.notify_one();
    }
}

enum Failure {
    Transient(String),
    Fatal(Error),
}

#[derive(Debug)]
pub struct OpenAiClient {
    config: BackendConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    gate: Semaphore,
    requests: AtomicU64,
}

#[derive(Deserialize)]
struct EmbeddingData {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingData>,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

fn png_base64(image: &RgbImage) -> Result<String> {
    let mut buf = Cursor::new(Vec::new());
    image.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(B64.encode(buf.into_inner()))
}

impl OpenAiClient {
    pub fn new(config: BackendConfig) -> Result<Self> {
        config.validate()?;
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(config.timeout())).http_status_as_error(false).build().into();
        let api_key = config.api_key_env.as_ref().and_then(|var| std::env::var(var).ok());
        let gate = Semaphore::new(config.max_in_flight);
        Ok(Self { config, agent, api_key, gate, requests: AtomicU64::new(0) })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Number of HTTP requests actually sent, retries included.
    pub fn requests_sent(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.url.trim_end_matches('/'), path)
    }

    fn send_once(&self, path: &str, body: &Value) -> std::result::Result<Value, Failure> {
        let _permit = self.gate.acquire();
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut req = self.agent.post(&self.url(path)).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => return Err(Failure::Transient(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Failure::Transient(e.to_string()))?;
        match status {
            200..=299 => {
                serde_json::from_str(&text).map_err(|e| Failure::Fatal(Error::MalformedResponse(format!("invalid JSON from {path}: {e}"))))
            }
            429 | 500..=599 => Err(Failure::Transient(format!("HTTP {status} from {path}"))),
            _ => Err(Failure::Fatal(Error::BackendUnavailable(format!("HTTP {status} from {path}: {text}")))),
        }
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let mut attempt = 0;
        loop {
            match self.send_once(path, body) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(msg)) if attempt >= RETRIES => {
                    return Err(Error::BackendUnavailable(format!("{} after {} attempts: {msg}", self.url(path), attempt + 1)))
                }
                Err(Failure::Transient(msg)) => {
                    tracing::debug!("retrying {path}: {msg}");
                    std::thread::sleep(BACKOFF_BASE * 2u32.pow(attempt));
                    attempt += 1;
                }
            }
        }
    }

    fn embeddings(&self, input: Value, expected: usize) -> Result<Vec<EmbeddingVector>> {
        let body = json!({ "model": self.config.model, "input": input });
        let raw = self.post("/v1/embeddings", &body)?;
        let mut resp: EmbeddingsResponse =
            serde_json::from_value(raw).map_err(|e| Error::MalformedResponse(format!("embeddings payload: {e}")))?;
        if resp.data.len() != expected {
            return Err(Error::MalformedResponse(format!("{} embeddings for {expected} inputs", resp.data.len())));
        }
        if resp.data.iter().all(|d| d.index.is_some()) {
            resp.data.sort_by_key(|d| d.index);
        }
        resp.data.into_iter().map(|d| EmbeddingVector::new(d.embedding).map_err(|e| Error::MalformedResponse(e.to_string()))).collect()
    }

    fn chat(&self, content: Vec<Value>) -> Result<String> {
        let body = json!({
            "model": self.config.model,
            "messages": [{ "role": "user", "content": content }],
        });
        let raw = self.post("/v1/chat/completions", &body)?;
        let resp: ChatResponse = serde_json::from_value(raw).map_err(|e| Error::MalformedResponse(format!("chat payload: {e}")))?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Error::MalformedResponse("chat response without content".into()))
    }
}

impl TextEmbedder for OpenAiClient {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        self.embeddings(json!(texts), texts.len())
    }
}

impl ImageEmbedder for OpenAiClient {
    fn embed_image(&self, input: &ImageInput<'_>) -> Result<EmbeddingVector> {
        let data = png_base64(input.image)?;
        let mut v = self.embeddings(json!([{ "type": "image_b64", "data": data }]), 1)?;
        Ok(v.remove(0))
    }
}

impl Captioner for OpenAiClient {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn caption(&self, frames: &[ImageInput<'_>], prompt: &str) -> Result<String> {
        let mut content = Vec::with_capacity(frames.len() + 1);
        for f in frames {
            let url = format!("data:image/png;base64,{}", png_base64(f.image)?);
            content.push(json!({ "type": "image_url", "image_url": { "url": url } }));
        }
        content.push(json!({ "type": "text", "text": prompt }));
        self.chat(content)
    }

    fn supports_multi_image(&self) -> bool {
        self.config.multi_image
    }
}

impl RuleGeneralizer for OpenAiClient {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn complete_rules(&self, prompt: &str, documents: &[String]) -> Result<String> {
        let listing: Vec<String> = documents.iter().map(|d| format!("- {}", d.trim())).collect();
        let text = format!("{prompt}\n\n{}", listing.join("\n"));
        self.chat(vec![json!({ "type": "text", "text": text })])
    }
}
