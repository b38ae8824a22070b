use std::sync::OnceLock;

use indexmap::IndexMap;
use regex::Regex;
use serde_json::{Map, Value};

use super::{JudgeError, Mode, Parsed, Rationale};

fn answer_token() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\[\[(yes|no)\]\]").unwrap())
}

fn answer_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)answer\s*:").unwrap())
}

fn token_to_parsed(tok: &str) -> Parsed {
    if tok.eq_ignore_ascii_case("yes") {
        Parsed::High
    } else {
        Parsed::Low
    }
}

/// Baseline-family modes take the last `[[yes]]`/`[[no]]` token. The chain
/// mode takes the first token after the final `Answer:` marker.
pub fn parse_binary_answer(text: &str, mode: Mode) -> Parsed {
    let tok = if mode == Mode::KnowledgeChain {
        answer_marker()
            .find_iter(text)
            .last()
            .and_then(|m| answer_token().captures(&text[m.end()..]))
            .map(|c| c.get(1).unwrap().as_str().to_string())
    } else {
        answer_token().captures_iter(text).last().map(|c| c.get(1).unwrap().as_str().to_string())
    };
    tok.map_or(Parsed::Unparseable, |t| token_to_parsed(&t))
}

/// Reasoning preceding the final `Answer:` marker in a chain response, with a
/// leading `Reasoning:` label removed.
pub fn reasoning_text(text: &str, mode: Mode) -> Option<String> {
    if mode != Mode::KnowledgeChain {
        return None;
    }
    let m = answer_marker().find_iter(text).last()?;
    let before = text[..m.start()].trim();
    let before = before
        .get(..10)
        .filter(|p| p.eq_ignore_ascii_case("reasoning:"))
        .map_or(before, |_| before[10..].trim());
    (!before.is_empty()).then(|| before.to_string())
}

/// Outermost balanced `{...}` block starting at the first `{`, honoring JSON
/// string escapes.
fn balanced_block(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

fn rationale_object(v: Value) -> Result<Map<String, Value>, JudgeError> {
    let Value::Object(mut obj) = v else {
        return Err(JudgeError::RationaleParse("top-level JSON is not an object".into()));
    };
    if !obj.contains_key("per_object") {
        if let Some(Value::Object(inner)) = obj.get("analysis") {
            let inner = inner.clone();
            obj = inner;
        }
    }
    Ok(obj)
}

/// Parses a generator reply into a [`Rationale`]. Returns the rationale and
/// data-quality warnings (extra keys, per-object keys outside `key_objects`).
/// An empty `key_objects` skips the key check.
pub fn parse_rationale_json(text: &str, key_objects: &[String]) -> Result<(Rationale, Vec<String>), JudgeError> {
    let value = match serde_json::from_str::<Value>(text.trim()) {
        Ok(v) => v,
        Err(strict) => {
            let block = balanced_block(text)
                .ok_or_else(|| JudgeError::RationaleParse(format!("no JSON object found ({strict})")))?;
            serde_json::from_str(block).map_err(|e| JudgeError::RationaleParse(e.to_string()))?
        }
    };
    let obj = rationale_object(value)?;
    let mut warnings = Vec::new();
    let per = match obj.get("per_object") {
        Some(Value::Object(m)) => m,
        Some(_) => return Err(JudgeError::RationaleParse("`per_object` is not an object".into())),
        None => return Err(JudgeError::RationaleParse("missing required key `per_object`".into())),
    };
    let overall = match obj.get("rationale_overall") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(JudgeError::RationaleParse("`rationale_overall` is not a string".into())),
        None => return Err(JudgeError::RationaleParse("missing required key `rationale_overall`".into())),
    };
    for k in obj.keys().filter(|k| *k != "per_object" && *k != "rationale_overall") {
        warnings.push(format!("extra key `{k}` ignored"));
    }
    let mut per_object = IndexMap::new();
    for (noun, v) in per {
        let Value::String(s) = v else {
            return Err(JudgeError::RationaleParse(format!("per_object[{noun:?}] is not a string")));
        };
        if !key_objects.is_empty() && !key_objects.iter().any(|k| k == noun) {
            warnings.push(format!("per_object key {noun:?} not among key objects; dropped"));
            continue;
        }
        per_object.insert(noun.clone(), s.clone());
    }
    Ok((Rationale { per_object, rationale_overall: overall, label_informed: false }, warnings))
}
