//! Prompt rendering, remote chat judging, answer/rationale parsing and the
//! on-disk response cache.

mod cache;
mod client;
mod parse;
mod prompt;
mod runner;

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{BinaryLabel, ImageRecord};
use crate::highlevel::NounMatch;

pub use cache::{cache_key, file_digest, CacheRecord, ResponseCache};
pub(crate) use cache::sha_hex;
pub use client::{
    ChatBackend, ChatReply, ChatRequest, HttpChatClient, HttpConfig, DEFAULT_MAX_IMAGE_BYTES, DEFAULT_RETRIES,
    DEFAULT_TIMEOUT_SECS,
};
pub use parse::{parse_binary_answer, parse_rationale_json, reasoning_text};
pub use prompt::{
    key_object_context_json, render_prompt, render_rationale_prompt, render_template, template_text, RenderedPrompt,
    TemplateId,
};
pub use runner::{Judge, RequestStatus, DEFAULT_MAX_IN_FLIGHT};

pub const DEFAULT_PROMPT_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("template error: unresolved placeholder `{0}`")]
    Placeholder(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("invalid prompt config: {0}")]
    Config(String),
    #[error("rationale parse error: {0}")]
    RationaleParse(String),
    #[error("request rejected with HTTP {status}: {body}")]
    Request { status: u16, body: String },
    #[error("transport error after {} attempts: {}", .attempts.len(), .attempts.join("; "))]
    Transport { attempts: Vec<String> },
    #[error("image encoding error: {0}")]
    Encoding(String),
    #[error("unexpected response shape: {0}")]
    Response(String),
    #[error("digest error for {path}: {source}")]
    Digest {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cache error at {path}: {message}")]
    Cache { path: String, message: String },
    #[error("no endpoint configured (use --endpoint or VPF_ENDPOINT)")]
    NoEndpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "cog")]
    CognitiveInjection,
    #[serde(rename = "chain")]
    KnowledgeChain,
    #[serde(rename = "ctx")]
    AlignedKeyObjectContext,
    #[serde(rename = "rationale")]
    KeyObjectRationale,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Baseline,
        Mode::CognitiveInjection,
        Mode::KnowledgeChain,
        Mode::AlignedKeyObjectContext,
        Mode::KeyObjectRationale,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::CognitiveInjection => "cog",
            Mode::KnowledgeChain => "chain",
            Mode::AlignedKeyObjectContext => "ctx",
            Mode::KeyObjectRationale => "rationale",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = JudgeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| JudgeError::Config(format!("unknown mode `{s}` (baseline|cog|chain|ctx|rationale)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RationaleVariant {
    Agnostic,
    Informed,
}

impl RationaleVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            RationaleVariant::Agnostic => "agnostic",
            RationaleVariant::Informed => "informed",
        }
    }
}

impl fmt::Display for RationaleVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RationaleVariant {
    type Err = JudgeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "agnostic" => Ok(RationaleVariant::Agnostic),
            "informed" => Ok(RationaleVariant::Informed),
            _ => Err(JudgeError::Config(format!("unknown rationale variant `{s}` (agnostic|informed)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub mode: Mode,
    pub rationale_variant: Option<RationaleVariant>,
    pub model_name: String,
    pub reasoning_effort: Option<String>,
    pub prompt_version: String,
}

impl PromptConfig {
    pub fn new(mode: Mode, model_name: impl Into<String>) -> Self {
        PromptConfig {
            mode,
            rationale_variant: (mode == Mode::KeyObjectRationale).then_some(RationaleVariant::Agnostic),
            model_name: model_name.into(),
            reasoning_effort: None,
            prompt_version: DEFAULT_PROMPT_VERSION.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), JudgeError> {
        match (self.mode, self.rationale_variant) {
            (Mode::KeyObjectRationale, None) => Err(JudgeError::Config("rationale mode requires a rationale variant".into())),
            (Mode::KeyObjectRationale, Some(_)) => Ok(()),
            (m, Some(_)) => Err(JudgeError::Config(format!("rationale variant given for mode `{m}`"))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parsed {
    High,
    Low,
    Unparseable,
}

impl Parsed {
    pub fn label(self) -> Option<BinaryLabel> {
        match self {
            Parsed::High => Some(BinaryLabel::High),
            Parsed::Low => Some(BinaryLabel::Low),
            Parsed::Unparseable => None,
        }
    }
}

/// A pre-generated key-object rationale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rationale {
    pub per_object: IndexMap<String, String>,
    pub rationale_overall: String,
    pub label_informed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeRequest {
    pub record: ImageRecord,
    pub config: PromptConfig,
    pub key_objects: Option<Vec<NounMatch>>,
    pub rationale: Option<Rationale>,
}

impl JudgeRequest {
    pub fn new(record: ImageRecord, config: PromptConfig) -> Self {
        JudgeRequest { record, config, key_objects: None, rationale: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub raw_text: String,
    pub parsed: Parsed,
    pub reasoning_text: Option<String>,
    pub latency_ms: u64,
    pub cache_hit: bool,
    pub cache_key: String,
    /// The request fell back to the baseline prompt for lack of key-object input.
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleRequest {
    pub record: ImageRecord,
    pub variant: RationaleVariant,
    pub model_name: String,
    pub reasoning_effort: Option<String>,
    pub prompt_version: String,
    pub key_objects: Vec<String>,
    pub label: Option<BinaryLabel>,
}
