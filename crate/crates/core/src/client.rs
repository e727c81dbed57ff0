//! Annotator clients. [`LiveClient`] talks to an OpenAI-compatible
//! chat-completions endpoint; [`ScriptedClient`] is a deterministic stand-in
//! for tests and dry runs.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::PromptBundle;
use crate::schema::{serialize_annotation, CoTAnnotation, Verdict};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientFailure {
    /// Worth retrying: rate limits, server errors, timeouts.
    #[error("transient client failure: {0}")]
    Transient(String),
    #[error("client failure: {0}")]
    Fatal(String),
}

#[async_trait]
pub trait AnnotatorClient: Send + Sync {
    async fn complete(&self, bundle: &PromptBundle) -> Result<String, ClientFailure>;
}

pub const API_KEY_ENV: &str = "FACECOT_API_KEY";
pub const API_KEY_FALLBACK_ENV: &str = "OPENAI_API_KEY";
pub const API_BASE_ENV: &str = "FACECOT_API_BASE";
pub const MODEL_ENV: &str = "FACECOT_MODEL";
pub const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";
pub const DEFAULT_MODEL: &str = "gpt-4o";

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage>,
    temperature: f32,
}

#[derive(Debug, Serialize, Deserialize)]
struct ChatMessage {
    role: &'static str,
    content: serde_json::Value,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ChatResponseMessage {
    content: Option<String>,
}

pub struct LiveClient {
    http: reqwest::Client,
    base_url: String,
    api_key: String,
    model: String,
}

impl LiveClient {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, model: impl Into<String>) -> Self {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .expect("http client builds");
        Self {
            http,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            model: model.into(),
        }
    }

    /// Reads the key from `FACECOT_API_KEY` (or `OPENAI_API_KEY`), and
    /// optionally the base URL and model.
    pub fn from_env() -> Result<Self, ClientFailure> {
        let key = std::env::var(API_KEY_ENV)
            .or_else(|_| std::env::var(API_KEY_FALLBACK_ENV))
            .map_err(|_| ClientFailure::Fatal(format!("{API_KEY_ENV} is not set")))?;
        let base = std::env::var(API_BASE_ENV).unwrap_or_else(|_| DEFAULT_API_BASE.to_string());
        let model = std::env::var(MODEL_ENV).unwrap_or_else(|_| DEFAULT_MODEL.to_string());
        Ok(Self::new(base, key, model))
    }

    fn request_body(&self, bundle: &PromptBundle) -> Result<serde_json::Value, ClientFailure> {
        let image_url = image_url(&bundle.image_ref)?;
        let req = ChatRequest {
            model: &self.model,
            messages: vec![
                ChatMessage {
                    role: "system",
                    content: serde_json::Value::String(bundle.system_prompt.clone()),
                },
                ChatMessage {
                    role: "user",
                    content: serde_json::json!([
                        { "type": "image_url", "image_url": { "url": image_url } },
                        { "type": "text", "text": bundle.user_text() },
                    ]),
                },
            ],
            temperature: 0.0,
        };
        serde_json::to_value(req).map_err(|e| ClientFailure::Fatal(e.to_string()))
    }
}

/// Remote references pass through; local files are inlined as data URLs.
fn image_url(image_ref: &str) -> Result<String, ClientFailure> {
    if ["http://", "https://", "data:"].iter().any(|p| image_ref.starts_with(p)) {
        return Ok(image_ref.to_string());
    }
    let path = Path::new(image_ref);
    let bytes = std::fs::read(path)
        .map_err(|e| ClientFailure::Fatal(format!("cannot read image {image_ref}: {e}")))?;
    let mime = match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => "image/png",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        Some("bmp") => "image/bmp",
        _ => "image/jpeg",
    };
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{mime};base64,{encoded}"))
}

#[async_trait]
impl AnnotatorClient for LiveClient {
    async fn complete(&self, bundle: &PromptBundle) -> Result<String, ClientFailure> {
        let body = self.request_body(bundle)?;
        let resp = self
            .http
            .post(format!("{}/chat/completions", self.base_url))
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .await
            .map_err(|e| ClientFailure::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ClientFailure::Transient(format!("http {status}")));
        }
        if !status.is_success() {
            let text = resp.text().await.unwrap_or_default();
            return Err(ClientFailure::Fatal(format!("http {status}: {text}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .await
            .map_err(|e| ClientFailure::Fatal(format!("bad response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ClientFailure::Fatal("response has no message content".into()))
    }
}

type Script = dyn Fn(&PromptBundle, u32) -> Result<String, ClientFailure> + Send + Sync;

/// Deterministic client driven by a function of the bundle and the 1-based
/// call number for that sample.
pub struct ScriptedClient {
    script: Box<Script>,
    calls: Mutex<HashMap<String, u32>>,
}

impl ScriptedClient {
    pub fn new<F>(script: F) -> Self
    where
        F: Fn(&PromptBundle, u32) -> Result<String, ClientFailure> + Send + Sync + 'static,
    {
        Self {
            script: Box::new(script),
            calls: Mutex::new(HashMap::new()),
        }
    }

    /// Always answers with a well-formed annotation concluding the bundle's label.
    pub fn echo() -> Self {
        Self::new(|b, _| Ok(template_annotation(&b.sample_id, b.label)))
    }

    pub fn calls(&self, sample_id: &str) -> u32 {
        self.calls.lock().unwrap().get(sample_id).copied().unwrap_or(0)
    }

    pub fn total_calls(&self) -> u64 {
        self.calls.lock().unwrap().values().map(|&c| u64::from(c)).sum()
    }
}

#[async_trait]
impl AnnotatorClient for ScriptedClient {
    async fn complete(&self, bundle: &PromptBundle) -> Result<String, ClientFailure> {
        let call = {
            let mut calls = self.calls.lock().unwrap();
            let c = calls.entry(bundle.sample_id.clone()).or_insert(0);
            *c += 1;
            *c
        };
        (self.script)(bundle, call)
    }
}

/// A plausible six-section annotation for `verdict`, in canonical form.
pub fn template_annotation(sample_id: &str, verdict: Verdict) -> String {
    let a = match verdict {
        Verdict::No => CoTAnnotation::new([
            format!("Image {sample_id} shows a person facing the camera in a natural indoor scene."),
            "The face is evenly lit with consistent shading and visible skin pores.".to_string(),
            "\"eyes\": open and reflective, \"mouth\": closed, \"skin\": natural texture".to_string(),
            "Depth cues, lighting and texture agree with a real face; no borders, moire or mask edges are present.".to_string(),
            "No spoofing characteristics are visible.".to_string(),
            "No".to_string(),
        ]),
        Verdict::Yes => CoTAnnotation::new([
            format!("Image {sample_id} shows a face presented inside a flat medium held in front of the camera."),
            "The facial region appears flat with uniform sharpness and no depth variation.".to_string(),
            "\"eyes\": fixed gaze, \"mouth\": static, \"skin\": smooth with print or screen texture".to_string(),
            "The flatness, texture artifacts and visible medium boundary indicate a presentation attack.".to_string(),
            "The face is reproduced on an artificial medium; edges and surface artifacts reveal the attack.".to_string(),
            "Yes".to_string(),
        ]),
    }
    .expect("template sections are valid");
    serialize_annotation(&a)
}
