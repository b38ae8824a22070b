use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{JudgeError, JudgeRequest, Mode, RationaleRequest};

pub(crate) fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the file's bytes, so equal content at two paths digests equally.
pub fn file_digest(path: &Path) -> Result<String, JudgeError> {
    let bytes = fs::read(path).map_err(|e| JudgeError::Digest { path: path.display().to_string(), source: e })?;
    Ok(sha_hex(&bytes))
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    task: &'a str,
    model_name: &'a str,
    reasoning_effort: Option<&'a str>,
    prompt_version: &'a str,
    mode: &'a str,
    rationale_variant: Option<&'a str>,
    message: &'a str,
    image_sha256: String,
    payload_sha256: Option<String>,
}

impl KeyMaterial<'_> {
    fn key(&self) -> String {
        sha_hex(serde_json::to_string(self).expect("key material serializes").as_bytes())
    }
}

/// Content hash identifying a judging request.
pub fn cache_key(request: &JudgeRequest) -> Result<String, JudgeError> {
    let cfg = &request.config;
    let payload = match cfg.mode {
        Mode::AlignedKeyObjectContext => request.key_objects.as_ref().filter(|k| !k.is_empty()).map(|k| {
            sha_hex(serde_json::to_string(k).expect("matches serialize").as_bytes())
        }),
        Mode::KeyObjectRationale => request.rationale.as_ref().filter(|r| !r.per_object.is_empty()).map(|r| {
            sha_hex(serde_json::to_string(&r.per_object).expect("map serializes").as_bytes())
        }),
        _ => None,
    };
    Ok(KeyMaterial {
        task: "judge",
        model_name: &cfg.model_name,
        reasoning_effort: cfg.reasoning_effort.as_deref(),
        prompt_version: &cfg.prompt_version,
        mode: cfg.mode.as_str(),
        rationale_variant: cfg.rationale_variant.map(|v| v.as_str()),
        message: &request.record.message,
        image_sha256: file_digest(Path::new(&request.record.image_path))?,
        payload_sha256: payload,
    }
    .key())
}

pub(crate) fn rationale_cache_key(request: &RationaleRequest) -> Result<String, JudgeError> {
    let payload = serde_json::json!({ "key_objects": request.key_objects, "label": request.label }).to_string();
    Ok(KeyMaterial {
        task: "rationale_gen",
        model_name: &request.model_name,
        reasoning_effort: request.reasoning_effort.as_deref(),
        prompt_version: &request.prompt_version,
        mode: "rationale",
        rationale_variant: Some(request.variant.as_str()),
        message: &request.record.message,
        image_sha256: file_digest(Path::new(&request.record.image_path))?,
        payload_sha256: Some(sha_hex(payload.as_bytes())),
    }
    .key())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub request_digest: String,
    pub model: String,
    pub raw_text: String,
    pub reasoning_text: Option<String>,
    pub latency_ms: u64,
    pub attempts: u32,
    pub created_unix: u64,
}

/// One JSON file per key under a directory. Writes go through a temporary
/// file and a rename, so readers never observe partial records.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, JudgeError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)
            .map_err(|e| JudgeError::Cache { path: dir.display().to_string(), message: e.to_string() })?;
        Ok(ResponseCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheRecord>, JudgeError> {
        let path = self.path_for(key);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(JudgeError::Cache { path: path.display().to_string(), message: e.to_string() }),
        };
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| JudgeError::Cache { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn put(&self, record: &CacheRecord) -> Result<(), JudgeError> {
        let path = self.path_for(&record.key);
        let tmp = self.dir.join(format!(
            ".{}.{}.{}.tmp",
            record.key,
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let err = |e: std::io::Error| JudgeError::Cache { path: path.display().to_string(), message: e.to_string() };
        let body = serde_json::to_vec_pretty(record).expect("cache record serializes");
        fs::write(&tmp, body).map_err(err)?;
        fs::rename(&tmp, &path).map_err(err)
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|it| {
                it.filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
