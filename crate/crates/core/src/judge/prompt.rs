use serde_json::json;

use super::{JudgeError, Mode, PromptConfig, Rationale, RationaleVariant};
use crate::datamodel::{BinaryLabel, ImageRecord};
use crate::highlevel::NounMatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateId {
    Baseline,
    CognitiveInjection,
    KnowledgeChain,
    AlignedContext,
    KeyObjectRationale,
    RationaleAgnostic,
    RationaleInformed,
}

impl TemplateId {
    pub const ALL: [TemplateId; 7] = [
        TemplateId::Baseline,
        TemplateId::CognitiveInjection,
        TemplateId::KnowledgeChain,
        TemplateId::AlignedContext,
        TemplateId::KeyObjectRationale,
        TemplateId::RationaleAgnostic,
        TemplateId::RationaleInformed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateId::Baseline => "baseline",
            TemplateId::CognitiveInjection => "cognitive_injection",
            TemplateId::KnowledgeChain => "knowledge_chain",
            TemplateId::AlignedContext => "aligned_context",
            TemplateId::KeyObjectRationale => "key_object_rationale",
            TemplateId::RationaleAgnostic => "rationale_agnostic",
            TemplateId::RationaleInformed => "rationale_informed",
        }
    }
}

macro_rules! templates {
    ($($name:literal),*) => {
        const TEMPLATES: &[(&str, &str, &str)] = &[
            $((
                $name,
                include_str!(concat!("templates/", $name, ".system.txt")),
                include_str!(concat!("templates/", $name, ".user.txt")),
            )),*
        ];
    };
}

templates!(
    "baseline",
    "cognitive_injection",
    "knowledge_chain",
    "aligned_context",
    "key_object_rationale",
    "rationale_agnostic",
    "rationale_informed"
);

/// Raw `(system, user)` template text.
pub fn template_text(id: TemplateId) -> (&'static str, &'static str) {
    let (_, s, u) = TEMPLATES.iter().find(|(n, _, _)| *n == id.name()).expect("every template is embedded");
    (s, u)
}

/// Substitutes `{name}` placeholders; `{{` and `}}` render as literal braces.
pub fn render_template(text: &str, vars: &[(&str, &str)]) -> Result<String, JudgeError> {
    let mut out = String::with_capacity(text.len() + 64);
    let mut rest = text;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(r) = tail.strip_prefix("{{") {
            out.push('{');
            rest = r;
        } else if let Some(r) = tail.strip_prefix("}}") {
            out.push('}');
            rest = r;
        } else if tail.starts_with('}') {
            return Err(JudgeError::Template(format!("single `}}` at byte {}", text.len() - tail.len())));
        } else {
            let end = tail.find('}').ok_or_else(|| JudgeError::Template("unterminated `{`".into()))?;
            let name = &tail[1..end];
            let value = vars
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| JudgeError::Placeholder(name.to_string()))?;
            out.push_str(value);
            rest = &tail[end + 1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub template: TemplateId,
    pub system: String,
    pub user: String,
    pub degraded: bool,
}

fn render(id: TemplateId, vars: &[(&str, &str)], degraded: bool) -> Result<RenderedPrompt, JudgeError> {
    let (s, u) = template_text(id);
    Ok(RenderedPrompt { template: id, system: render_template(s, vars)?, user: render_template(u, vars)?, degraded })
}

/// Compact `{"key_objects":[{"noun":..,"count":..}]}` context for the aligned
/// key-object prompt.
pub fn key_object_context_json(matches: &[NounMatch]) -> String {
    json!({ "key_objects": matches }).to_string()
}

/// Judging prompt. Key-object modes without key-object input render the
/// baseline prompt and set `degraded`.
pub fn render_prompt(
    config: &PromptConfig,
    record: &ImageRecord,
    key_objects: Option<&[NounMatch]>,
    rationale: Option<&Rationale>,
) -> Result<RenderedPrompt, JudgeError> {
    config.validate()?;
    let message = record.message.as_str();
    match config.mode {
        Mode::Baseline => render(TemplateId::Baseline, &[("message", message)], false),
        Mode::CognitiveInjection => render(TemplateId::CognitiveInjection, &[("message", message)], false),
        Mode::KnowledgeChain => render(TemplateId::KnowledgeChain, &[("message", message)], false),
        Mode::AlignedKeyObjectContext => match key_objects {
            Some(ko) if !ko.is_empty() => {
                let ctx = key_object_context_json(ko);
                render(TemplateId::AlignedContext, &[("message", message), ("key_object_json", &ctx)], false)
            }
            _ => render(TemplateId::Baseline, &[("message", message)], true),
        },
        Mode::KeyObjectRationale => match rationale {
            Some(r) if !r.per_object.is_empty() => {
                let map = serde_json::to_string(&r.per_object).expect("string map serializes");
                render(TemplateId::KeyObjectRationale, &[("message", message), ("key_objects", &map)], false)
            }
            _ => render(TemplateId::Baseline, &[("message", message)], true),
        },
    }
}

/// Rationale-generation prompt. The informed variant requires the human label.
pub fn render_rationale_prompt(
    variant: RationaleVariant,
    message: &str,
    key_objects: &[String],
    label: Option<BinaryLabel>,
) -> Result<RenderedPrompt, JudgeError> {
    let list = serde_json::to_string(key_objects).expect("string list serializes");
    match variant {
        RationaleVariant::Agnostic => {
            render(TemplateId::RationaleAgnostic, &[("message", message), ("key_objects", &list)], false)
        }
        RationaleVariant::Informed => {
            let label = label.ok_or(JudgeError::Placeholder("label_lower".into()))?;
            let lower = label.as_str().to_string();
            let upper = lower.to_uppercase();
            render(
                TemplateId::RationaleInformed,
                &[("message", message), ("key_objects", &list), ("label_upper", &upper), ("label_lower", &lower)],
                false,
            )
        }
    }
}
