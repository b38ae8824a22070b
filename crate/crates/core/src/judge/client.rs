use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::cache::sha_hex;
use super::{JudgeError, RenderedPrompt};

pub const DEFAULT_TIMEOUT_SECS: u64 = 120;
pub const DEFAULT_RETRIES: u32 = 3;
pub const DEFAULT_MAX_IMAGE_BYTES: usize = 20 * 1024 * 1024;
pub const API_KEY_ENV: &str = "VPF_API_KEY";
pub const ENDPOINT_ENV: &str = "VPF_ENDPOINT";

/// A fully rendered chat call.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub reasoning_effort: Option<String>,
    pub system: String,
    pub user: String,
    pub image_data_url: String,
}

impl ChatRequest {
    pub fn new(
        model: &str,
        reasoning_effort: Option<&str>,
        prompt: &RenderedPrompt,
        image_path: &Path,
        max_image_bytes: usize,
    ) -> Result<Self, JudgeError> {
        let bytes = fs::read(image_path)
            .map_err(|e| JudgeError::Encoding(format!("{}: {e}", image_path.display())))?;
        if bytes.len() > max_image_bytes {
            return Err(JudgeError::Encoding(format!(
                "{} is {} bytes, limit {max_image_bytes}",
                image_path.display(),
                bytes.len()
            )));
        }
        let mime = match image::guess_format(&bytes) {
            Ok(image::ImageFormat::Png) => "image/png",
            Ok(image::ImageFormat::Jpeg) => "image/jpeg",
            Ok(image::ImageFormat::WebP) => "image/webp",
            Ok(image::ImageFormat::Gif) => "image/gif",
            _ => "application/octet-stream",
        };
        Ok(ChatRequest {
            model: model.to_string(),
            reasoning_effort: reasoning_effort.map(str::to_string),
            system: prompt.system.clone(),
            user: prompt.user.clone(),
            image_data_url: format!("data:{mime};base64,{}", STANDARD.encode(&bytes)),
        })
    }

    pub fn body(&self) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": self.system},
                {"role": "user", "content": [
                    {"type": "text", "text": self.user},
                    {"type": "image_url", "image_url": {"url": self.image_data_url}}
                ]}
            ]
        });
        if let Some(e) = &self.reasoning_effort {
            body["reasoning_effort"] = json!(e);
        }
        body
    }

    pub fn digest(&self) -> String {
        sha_hex(self.body().to_string().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatReply {
    pub text: String,
    pub reasoning: Option<String>,
    pub attempts: u32,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, JudgeError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retries: u32,
    pub backoff_base: Duration,
    pub seed: u64,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpConfig {
            endpoint: endpoint.into(),
            api_key: None,
            timeout: Duration::from_secs(DEFAULT_TIMEOUT_SECS),
            retries: DEFAULT_RETRIES,
            backoff_base: Duration::from_millis(500),
            seed: 0,
        }
    }

    /// Endpoint from the argument or `VPF_ENDPOINT`; key from `VPF_API_KEY`.
    pub fn from_env(endpoint: Option<&str>) -> Result<Self, JudgeError> {
        let endpoint = endpoint
            .map(str::to_string)
            .or_else(|| std::env::var(ENDPOINT_ENV).ok())
            .filter(|e| !e.trim().is_empty())
            .ok_or(JudgeError::NoEndpoint)?;
        let mut cfg = HttpConfig::new(endpoint);
        cfg.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }
}

/// Blocking OpenAI-style chat-completions client with retries.
pub struct HttpChatClient {
    config: HttpConfig,
    agent: ureq::Agent,
    rng: Mutex<ChaCha8Rng>,
}

enum Failure {
    Retry(String),
    Fatal(JudgeError),
}

impl HttpChatClient {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let rng = Mutex::new(ChaCha8Rng::seed_from_u64(config.seed));
        HttpChatClient { config, agent, rng }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let jitter: f64 = self.rng.lock().expect("rng lock").random_range(0.5..1.5);
        self.config.backoff_base.mul_f64(2f64.powi(attempt as i32) * jitter)
    }

    fn attempt(&self, body: &Value) -> Result<(String, Option<String>), Failure> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(k) = &self.config.api_key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Failure::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Failure::Retry(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(Failure::Retry(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(Failure::Fatal(JudgeError::Request { status, body: text }));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| Failure::Fatal(JudgeError::Response(e.to_string())))?;
        extract_reply(&v).map_err(Failure::Fatal)
    }
}

/// Pulls the assistant text (and optional reasoning) out of a
/// chat-completions response body.
pub fn extract_reply(v: &Value) -> Result<(String, Option<String>), JudgeError> {
    let msg = v
        .pointer("/choices/0/message")
        .ok_or_else(|| JudgeError::Response("missing choices[0].message".into()))?;
    let text = match msg.get("content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(parts)) => parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect(),
        _ => return Err(JudgeError::Response("missing message content".into())),
    };
    let reasoning = ["reasoning_content", "reasoning"]
        .iter()
        .find_map(|k| msg.get(*k).and_then(Value::as_str))
        .map(str::to_string);
    Ok((text, reasoning))
}

impl ChatBackend for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, JudgeError> {
        let body = request.body();
        let mut log = Vec::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                thread::sleep(self.backoff(attempt - 1));
            }
            match self.attempt(&body) {
                Ok((text, reasoning)) => return Ok(ChatReply { text, reasoning, attempts: attempt + 1 }),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(msg)) => {
                    log::warn!("attempt {} to {} failed: {msg}", attempt + 1, self.config.endpoint);
                    log.push(format!("attempt {}: {msg}", attempt + 1));
                }
            }
        }
        Err(JudgeError::Transport { attempts: log })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reply_shapes() {
        let v = json!({"choices":[{"message":{"content":"[[yes]]"}}]});
        assert_eq!(extract_reply(&v).unwrap(), ("[[yes]]".to_string(), None));
        let v = json!({"choices":[{"message":{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}],
            "reasoning_content":"r"}}]});
        assert_eq!(extract_reply(&v).unwrap(), ("ab".to_string(), Some("r".to_string())));
        assert!(extract_reply(&json!({})).is_err());
    }

    #[test]
    fn body_shape() {
        let req = ChatRequest {
            model: "m".into(),
            reasoning_effort: Some("high".into()),
            system: "s".into(),
            user: "u".into(),
            image_data_url: "data:image/png;base64,AA==".into(),
        };
        let b = req.body();
        assert_eq!(b["messages"][0]["role"], "system");
        assert_eq!(b["messages"][1]["content"][1]["image_url"]["url"], "data:image/png;base64,AA==");
        assert_eq!(b["reasoning_effort"], "high");
    }

    #[test]
    fn oversize_image_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        fs::write(&p, vec![0u8; 100]).unwrap();
        let prompt = RenderedPrompt {
            template: super::super::TemplateId::Baseline,
            system: "s".into(),
            user: "u".into(),
            degraded: false,
        };
        assert!(matches!(ChatRequest::new("m", None, &prompt, &p, 10), Err(JudgeError::Encoding(_))));
    }

    #[test]
    fn unreachable_endpoint_exhausts_retries() {
        let mut cfg = HttpConfig::new("http://127.0.0.1:9/v1/chat/completions");
        cfg.retries = 2;
        cfg.backoff_base = Duration::from_millis(1);
        cfg.timeout = Duration::from_secs(2);
        let client = HttpChatClient::new(cfg);
        let req = ChatRequest {
            model: "m".into(),
            reasoning_effort: None,
            system: "s".into(),
            user: "u".into(),
            image_data_url: String::new(),
        };
        match client.complete(&req) {
            Err(JudgeError::Transport { attempts }) => assert_eq!(attempts.len(), 3),
            other => panic!("expected transport error, got {other:?}"),
        }
    }
}
