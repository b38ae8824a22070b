//! Detection-record ingestion: key-object and human-presence indicators and
//! the `[1, x_obj, x_hum]` design rows.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

const KEY_LABEL_PREFIX: &str = "a photo of ";

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "in", "is", "it", "of", "on", "or", "our",
    "that", "the", "this", "to", "with", "you", "your",
];

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("invalid detection JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("validation error at {path}: {message}")]
    Validation { path: String, message: String },
    #[error("design matrix needs at least one record")]
    EmptyDesign,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn schema(path: &str, message: impl Into<String>) -> DetectionError {
    DetectionError::Schema { path: path.to_string(), message: message.into() }
}

fn invalid(path: &str, message: impl Into<String>) -> DetectionError {
    DetectionError::Validation { path: path.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorSource {
    Owlvit,
    Yolo,
    Other,
}

impl DetectorSource {
    pub fn parse(s: &str) -> Self {
        match s.trim().to_ascii_lowercase().as_str() {
            "owlvit" => DetectorSource::Owlvit,
            "yolo" => DetectorSource::Yolo,
            _ => DetectorSource::Other,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DetectorSource::Owlvit => "owlvit",
            DetectorSource::Yolo => "yolo",
            DetectorSource::Other => "other",
        }
    }
}

impl fmt::Display for DetectorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
    pub label: String,
    pub source: DetectorSource,
}

impl BoundingBox {
    /// Clamps coordinates to `[0, width] x [0, height]`. Parsing never clamps.
    pub fn clamped(&self, width: f64, height: f64) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
            ..self.clone()
        }
    }

    /// Noun from an open-vocabulary label of the form "a photo of <noun>".
    pub fn prompt_noun(&self) -> Option<&str> {
        self.label.strip_prefix(KEY_LABEL_PREFIX).map(str::trim)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounMatch {
    pub noun: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighLevelIndicators {
    pub id: Option<Value>,
    pub image_path: Option<String>,
    pub message: Option<String>,
    pub x_obj: u8,
    pub x_hum: u8,
    pub nouns: Vec<String>,
    pub matches: Vec<NounMatch>,
    pub key_boxes: Vec<BoundingBox>,
    pub human_count: u64,
    pub human_boxes: Vec<BoundingBox>,
    pub warnings: Vec<String>,
}

impl HighLevelIndicators {
    pub fn matched_nouns(&self) -> Vec<&str> {
        self.matches.iter().map(|m| m.noun.as_str()).collect()
    }

    /// Drops boxes scoring below `min_score` and recomputes the indicators
    /// from what remains.
    pub fn filter_min_score(&mut self, min_score: f64) {
        self.key_boxes.retain(|b| b.score >= min_score);
        self.human_boxes.retain(|b| b.score >= min_score);
        let mut matches: Vec<NounMatch> = Vec::new();
        for b in &self.key_boxes {
            let noun = b.prompt_noun().unwrap_or(&b.label).to_string();
            match matches.iter_mut().find(|m| m.noun == noun) {
                Some(m) => m.count += 1,
                None => matches.push(NounMatch { noun, count: 1 }),
            }
        }
        self.matches = matches;
        self.human_count = self.human_boxes.len() as u64;
        self.x_obj = u8::from(!self.matches.is_empty());
        self.x_hum = u8::from(!self.human_boxes.is_empty());
    }

    /// Serializes back to the detection-record schema.
    pub fn to_json(&self) -> Value {
        let mut top = Map::new();
        if let Some(id) = &self.id {
            top.insert("id".into(), id.clone());
        }
        if let Some(p) = &self.image_path {
            top.insert("image_path".into(), json!(p));
        }
        if let Some(m) = &self.message {
            top.insert("message".into(), json!(m));
        }
        top.insert(
            "indicators".into(),
            json!({
                "core_noun_presence": {
                    "binary": self.x_obj,
                    "detail": {
                        "nouns": self.nouns,
                        "matches": self.matches,
                        "boxes": self.key_boxes,
                    }
                },
                "human_presence": {
                    "binary": self.x_hum,
                    "detail": {"count": self.human_count, "boxes": self.human_boxes}
                }
            }),
        );
        Value::Object(top)
    }
}

/// Lowercases, splits on `_` and whitespace, drops stopwords.
pub fn message_tokens(message: &str) -> Vec<String> {
    message
        .split(|c: char| c == '_' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

fn get<'a>(obj: &'a Value, key: &str, path: &str) -> Result<&'a Value, DetectionError> {
    obj.get(key).ok_or_else(|| schema(&format!("{path}.{key}"), "missing field"))
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, DetectionError> {
    v.as_object().ok_or_else(|| schema(path, "expected an object"))
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>, DetectionError> {
    v.as_array().ok_or_else(|| schema(path, "expected an array"))
}

fn as_f64(v: &Value, path: &str) -> Result<f64, DetectionError> {
    v.as_f64().ok_or_else(|| schema(path, "expected a number"))
}

fn as_count(v: &Value, path: &str) -> Result<u64, DetectionError> {
    v.as_u64().ok_or_else(|| schema(path, "expected a nonnegative integer"))
}

fn as_str<'a>(v: &'a Value, path: &str) -> Result<&'a str, DetectionError> {
    v.as_str().ok_or_else(|| schema(path, "expected a string"))
}

fn parse_binary(v: &Value, path: &str) -> Result<u8, DetectionError> {
    match v.as_i64() {
        Some(0) => Ok(0),
        Some(1) => Ok(1),
        _ => Err(invalid(path, format!("binary must be 0 or 1, found {v}"))),
    }
}

fn parse_box(v: &Value, path: &str) -> Result<BoundingBox, DetectionError> {
    as_object(v, path)?;
    let num = |k: &str| as_f64(get(v, k, path)?, &format!("{path}.{k}"));
    let b = BoundingBox {
        x_min: num("x_min")?,
        y_min: num("y_min")?,
        x_max: num("x_max")?,
        y_max: num("y_max")?,
        score: num("score")?,
        label: as_str(get(v, "label", path)?, &format!("{path}.label"))?.to_string(),
        source: match v.get("source") {
            Some(s) => DetectorSource::parse(as_str(s, &format!("{path}.source"))?),
            None => DetectorSource::Other,
        },
    };
    if !(0.0..=1.0).contains(&b.score) {
        return Err(invalid(&format!("{path}.score"), format!("score {} outside [0, 1]", b.score)));
    }
    if b.x_max < b.x_min || b.y_max < b.y_min {
        return Err(invalid(path, "box max corner precedes min corner"));
    }
    Ok(b)
}

fn parse_boxes(detail: Option<&Value>, path: &str) -> Result<Vec<BoundingBox>, DetectionError> {
    match detail.and_then(|d| d.get("boxes")) {
        None => Ok(Vec::new()),
        Some(v) => as_array(v, &format!("{path}.boxes"))?
            .iter()
            .enumerate()
            .map(|(i, b)| parse_box(b, &format!("{path}.boxes[{i}]")))
            .collect(),
    }
}

pub fn parse_detection_record(json_text: &str) -> Result<HighLevelIndicators, DetectionError> {
    let root: Value = serde_json::from_str(json_text)?;
    parse_detection_value(&root)
}

pub fn parse_detection_value(root: &Value) -> Result<HighLevelIndicators, DetectionError> {
    as_object(root, "$")?;
    let ind = get(root, "indicators", "$")?;
    as_object(ind, "$.indicators")?;
    let mut warnings = Vec::new();

    let kp = "$.indicators.core_noun_presence";
    let key = get(ind, "core_noun_presence", "$.indicators")?;
    as_object(key, kp)?;
    let x_obj = parse_binary(get(key, "binary", kp)?, &format!("{kp}.binary"))?;
    let kd_path = format!("{kp}.detail");
    let key_detail = key.get("detail");
    if let Some(d) = key_detail {
        as_object(d, &kd_path)?;
    }
    let nouns = match key_detail.and_then(|d| d.get("nouns")) {
        None => Vec::new(),
        Some(v) => as_array(v, &format!("{kd_path}.nouns"))?
            .iter()
            .enumerate()
            .map(|(i, n)| as_str(n, &format!("{kd_path}.nouns[{i}]")).map(str::to_string))
            .collect::<Result<_, _>>()?,
    };
    let matches = match key_detail.and_then(|d| d.get("matches")) {
        None => Vec::new(),
        Some(v) => as_array(v, &format!("{kd_path}.matches"))?
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let mp = format!("{kd_path}.matches[{i}]");
                Ok(NounMatch {
                    noun: as_str(get(m, "noun", &mp)?, &format!("{mp}.noun"))?.to_string(),
                    count: as_count(get(m, "count", &mp)?, &format!("{mp}.count"))?,
                })
            })
            .collect::<Result<_, DetectionError>>()?,
    };
    let key_boxes = parse_boxes(key_detail, &kd_path)?;

    let hp = "$.indicators.human_presence";
    let hum = get(ind, "human_presence", "$.indicators")?;
    as_object(hum, hp)?;
    let x_hum = parse_binary(get(hum, "binary", hp)?, &format!("{hp}.binary"))?;
    let hd_path = format!("{hp}.detail");
    let hum_detail = hum.get("detail");
    if let Some(d) = hum_detail {
        as_object(d, &hd_path)?;
    }
    let human_boxes = parse_boxes(hum_detail, &hd_path)?;
    let human_count = match hum_detail.and_then(|d| d.get("count")) {
        Some(c) => as_count(c, &format!("{hd_path}.count"))?,
        None => human_boxes.len() as u64,
    };

    if key_detail.is_some() && (x_obj == 1) != !matches.is_empty() {
        warnings.push(format!("{kp}: binary {x_obj} disagrees with {} listed matches", matches.len()));
    }
    if hum_detail.is_some() && (x_hum == 1) != (human_count > 0) {
        warnings.push(format!("{hp}: binary {x_hum} disagrees with count {human_count}"));
    }
    if human_count != human_boxes.len() as u64 {
        warnings.push(format!("{hp}: count {human_count} but {} boxes listed", human_boxes.len()));
    }
    let matched_total: u64 = matches.iter().map(|m| m.count).sum();
    if matched_total != key_boxes.len() as u64 {
        warnings.push(format!("{kp}: match counts sum to {matched_total} but {} boxes listed", key_boxes.len()));
    }

    let message = root.get("message").and_then(Value::as_str).map(str::to_string);
    if let Some(msg) = &message {
        let tokens: BTreeSet<String> = message_tokens(msg).into_iter().collect();
        for n in nouns.iter().chain(matches.iter().map(|m| &m.noun)) {
            if !tokens.contains(&n.to_lowercase()) {
                warnings.push(format!("noun {n:?} does not occur in message {msg:?}"));
            }
        }
    }

    Ok(HighLevelIndicators {
        id: root.get("id").cloned(),
        image_path: root.get("image_path").and_then(Value::as_str).map(str::to_string),
        message,
        x_obj,
        x_hum,
        nouns,
        matches,
        key_boxes,
        human_count,
        human_boxes,
        warnings,
    })
}

pub fn load_detection(path: &Path) -> Result<HighLevelIndicators, DetectionError> {
    let text = fs::read_to_string(path).map_err(|e| DetectionError::Io { path: path.display().to_string(), source: e })?;
    parse_detection_record(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignRow {
    pub intercept: f64,
    pub x_obj: f64,
    pub x_hum: f64,
}

impl DesignRow {
    pub const COLUMNS: [&'static str; 3] = ["intercept", "x_obj", "x_hum"];

    pub fn new(x_obj: u8, x_hum: u8) -> Self {
        DesignRow { intercept: 1.0, x_obj: f64::from(x_obj), x_hum: f64::from(x_hum) }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.intercept, self.x_obj, self.x_hum]
    }
}

pub fn build_design_matrix(records: &[HighLevelIndicators]) -> Result<Vec<DesignRow>, DetectionError> {
    if records.is_empty() {
        return Err(DetectionError::EmptyDesign);
    }
    Ok(records.iter().map(|r| DesignRow::new(r.x_obj, r.x_hum)).collect())
}
