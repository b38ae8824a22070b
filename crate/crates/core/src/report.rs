//! Classification metrics, per-group feature means and lexical rationale
//! similarity.

use std::collections::HashMap;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::BinaryLabel;

pub const FEATURE_NAMES: [&str; 7] = ["colorfulness", "color_entropy_bits", "brightness", "a_at_p", "h_sal", "cbi", "t3"];
pub const BLEU_MAX_N: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("no evaluated pairs")]
    NoPairs,
    #[error("prediction `{0}` has no label")]
    Alignment(String),
    #[error("no feature row for `{0}`")]
    MissingFeatures(String),
    #[error("{0} token sequence is empty")]
    EmptyTokens(&'static str),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, pred: BinaryLabel, truth: BinaryLabel) {
        match (pred, truth) {
            (BinaryLabel::High, BinaryLabel::High) => self.tp += 1,
            (BinaryLabel::High, BinaryLabel::Low) => self.fp += 1,
            (BinaryLabel::Low, BinaryLabel::Low) => self.tn += 1,
            (BinaryLabel::Low, BinaryLabel::High) => self.fn_ += 1,
        }
    }
}

/// Counts with High as the positive class. Every prediction id must carry a label.
pub fn confusion(
    preds: &[(String, BinaryLabel)],
    labels: &HashMap<String, BinaryLabel>,
) -> Result<ConfusionCounts, ReportError> {
    if preds.is_empty() {
        return Err(ReportError::NoPairs);
    }
    let mut c = ConfusionCounts::default();
    for (id, p) in preds {
        let truth = labels.get(id).ok_or_else(|| ReportError::Alignment(id.clone()))?;
        c.add(*p, *truth);
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub delta_f1: Option<f64>,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub raw: RawMetrics,
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Harmonic mean; 0 when both inputs are 0. Any consistent unit.
pub fn f1_from_pr(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Percent metrics rounded to 2 decimals; `raw` keeps the unrounded fractions.
pub fn prf1(c: &ConfusionCounts) -> MetricRow {
    let acc = ratio(c.tp + c.tn, c.total()).unwrap_or(0.0);
    let prec = ratio(c.tp, c.tp + c.fp);
    let rec = ratio(c.tp, c.tp + c.fn_);
    let (p, r) = (prec.unwrap_or(0.0), rec.unwrap_or(0.0));
    let f1 = f1_from_pr(p, r);
    MetricRow {
        accuracy: round2(acc * 100.0),
        precision: round2(p * 100.0),
        recall: round2(r * 100.0),
        f1: round2(f1 * 100.0),
        delta_f1: None,
        precision_undefined: prec.is_none(),
        recall_undefined: rec.is_none(),
        raw: RawMetrics { accuracy: acc, precision: p, recall: r, f1 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupKey {
    HumanHigh,
    HumanLow,
    PredHigh,
    PredLow,
    TP,
    FP,
    TN,
    FN,
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One image's seven numeric features; `None` where an input was missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureValues {
    pub id: String,
    pub values: [Option<f64>; 7],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: GroupKey,
    pub model: Option<String>,
    pub n: usize,
    pub means: IndexMap<String, Option<f64>>,
}

fn summarize_group(
    group: GroupKey,
    model: Option<&str>,
    ids: &[&str],
    features: &HashMap<&str, &FeatureValues>,
    warnings: &mut Vec<String>,
) -> Result<Option<GroupSummary>, ReportError> {
    if ids.is_empty() {
        warnings.push(format!("group {group}{} is empty; omitted", model.map(|m| format!(" ({m})")).unwrap_or_default()));
        return Ok(None);
    }
    let mut sums = [0.0; 7];
    let mut counts = [0usize; 7];
    for id in ids {
        let row = features.get(id).ok_or_else(|| ReportError::MissingFeatures(id.to_string()))?;
        for (j, v) in row.values.iter().enumerate() {
            if let Some(v) = v {
                sums[j] += v;
                counts[j] += 1;
            }
        }
    }
    let means = FEATURE_NAMES
        .iter()
        .enumerate()
        .map(|(j, name)| (name.to_string(), (counts[j] > 0).then(|| sums[j] / counts[j] as f64)))
        .collect();
    Ok(Some(GroupSummary { group, model: model.map(str::to_string), n: ids.len(), means }))
}

/// Human-label groups over every labelled id with features.
pub fn human_group_means(
    features: &[FeatureValues],
    labels: &[(String, BinaryLabel)],
    warnings: &mut Vec<String>,
) -> Result<Vec<GroupSummary>, ReportError> {
    let index: HashMap<&str, &FeatureValues> = features.iter().map(|f| (f.id.as_str(), f)).collect();
    let mut out = Vec::new();
    for (key, want) in [(GroupKey::HumanHigh, BinaryLabel::High), (GroupKey::HumanLow, BinaryLabel::Low)] {
        let ids: Vec<&str> = labels.iter().filter(|(_, l)| *l == want).map(|(id, _)| id.as_str()).collect();
        out.extend(summarize_group(key, None, &ids, &index, warnings)?);
    }
    Ok(out)
}

/// Prediction and error-type groups for one model. FP = labelled Low but
/// predicted High.
pub fn prediction_group_means(
    model: &str,
    features: &[FeatureValues],
    preds: &[(String, BinaryLabel)],
    labels: &HashMap<String, BinaryLabel>,
    warnings: &mut Vec<String>,
) -> Result<Vec<GroupSummary>, ReportError> {
    let index: HashMap<&str, &FeatureValues> = features.iter().map(|f| (f.id.as_str(), f)).collect();
    let mut buckets: IndexMap<GroupKey, Vec<&str>> =
        [GroupKey::PredHigh, GroupKey::PredLow, GroupKey::FP, GroupKey::TP, GroupKey::TN, GroupKey::FN]
            .into_iter()
            .map(|k| (k, Vec::new()))
            .collect();
    for (id, p) in preds {
        let truth = *labels.get(id).ok_or_else(|| ReportError::Alignment(id.clone()))?;
        let pk = if *p == BinaryLabel::High { GroupKey::PredHigh } else { GroupKey::PredLow };
        let ek = match (p, truth) {
            (BinaryLabel::High, BinaryLabel::High) => GroupKey::TP,
            (BinaryLabel::High, BinaryLabel::Low) => GroupKey::FP,
            (BinaryLabel::Low, BinaryLabel::Low) => GroupKey::TN,
            (BinaryLabel::Low, BinaryLabel::High) => GroupKey::FN,
        };
        buckets[&pk].push(id);
        buckets[&ek].push(id);
    }
    let mut out = Vec::new();
    for (key, ids) in &buckets {
        out.extend(summarize_group(*key, Some(model), ids, &index, warnings)?);
    }
    Ok(out)
}

/// Lowercase, drop punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU with clipped n-gram precision up to `max_n`. An order with no
/// clipped matches contributes `1 / (t_n + 1)`, `t_n` being the candidate's
/// n-gram count at that order.
pub fn bleu(candidate: &[String], reference: &[String], max_n: usize) -> Result<f64, ReportError> {
    if candidate.is_empty() {
        return Err(ReportError::EmptyTokens("candidate"));
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let total: usize = cand.values().sum();
        let matched: usize = cand.iter().map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0))).sum();
        let p = if matched == 0 { 1.0 / (total as f64 + 1.0) } else { matched as f64 / total as f64 };
        log_sum += p.ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok(bp * (log_sum / max_n as f64).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with equal weight on precision and recall.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> Result<f64, ReportError> {
    if candidate.is_empty() {
        return Err(ReportError::EmptyTokens("candidate"));
    }
    if reference.is_empty() {
        return Err(ReportError::EmptyTokens("reference"));
    }
    let l = lcs_len(candidate, reference) as f64;
    Ok(f1_from_pr(l / candidate.len() as f64, l / reference.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPair {
    pub id: String,
    pub split: String,
    pub object: Option<String>,
    pub bleu: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub split: String,
    pub n: usize,
    pub bleu: Option<f64>,
    pub rouge_l: Option<f64>,
    pub bertscore_f1: Option<f64>,
    pub sbert_cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub candidate: String,
    pub reference: String,
    pub pairs: Vec<SimPair>,
    pub summary: Vec<SimSummary>,
    pub note: String,
    pub warnings: Vec<String>,
}

pub const EMBEDDING_NOTE: &str =
    "bertscore_f1 and sbert_cosine need embedding models and are not computed; they are emitted as null";

fn pair_scores(cand: &str, refr: &str) -> Option<(f64, f64)> {
    let (c, r) = (tokenize(cand), tokenize(refr));
    Some((bleu(&c, &r, BLEU_MAX_N).ok()?, rouge_l(&c, &r).ok()?))
}

/// Similarity between two rationale sets keyed by image id: each entry holds
/// the overall text and the per-object map.
pub fn similarity_report(
    candidate_name: &str,
    reference_name: &str,
    candidate: &IndexMap<String, (String, IndexMap<String, String>)>,
    reference: &IndexMap<String, (String, IndexMap<String, String>)>,
) -> SimReport {
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    for (id, (c_overall, c_per)) in candidate {
        let Some((r_overall, r_per)) = reference.get(id) else {
            warnings.push(format!("`{id}` has no {reference_name} rationale"));
            continue;
        };
        match pair_scores(c_overall, r_overall) {
            Some((b, r)) => pairs.push(SimPair { id: id.clone(), split: "Overall".into(), object: None, bleu: b, rouge_l: r }),
            None => warnings.push(format!("`{id}` overall rationale is empty")),
        }
        for (noun, c_text) in c_per {
            let Some(r_text) = r_per.get(noun) else { continue };
            match pair_scores(c_text, r_text) {
                Some((b, r)) => pairs.push(SimPair {
                    id: id.clone(),
                    split: "Per-Object".into(),
                    object: Some(noun.clone()),
                    bleu: b,
                    rouge_l: r,
                }),
                None => warnings.push(format!("`{id}` rationale for {noun:?} is empty")),
            }
        }
    }
    let summarize = |label: &str, filter: &dyn Fn(&SimPair) -> bool| {
        let sel: Vec<&SimPair> = pairs.iter().filter(|p| filter(p)).collect();
        let mean = |f: fn(&SimPair) -> f64| (!sel.is_empty()).then(|| sel.iter().map(|p| f(p)).sum::<f64>() / sel.len() as f64);
        SimSummary {
            split: label.to_string(),
            n: sel.len(),
            bleu: mean(|p| p.bleu),
            rouge_l: mean(|p| p.rouge_l),
            bertscore_f1: None,
            sbert_cosine: None,
        }
    };
    let summary = vec![
        summarize("Overall", &|p| p.split == "Overall"),
        summarize("Per-Object", &|p| p.split == "Per-Object"),
        summarize("All (Both)", &|_| true),
    ];
    SimReport {
        candidate: candidate_name.to_string(),
        reference: reference_name.to_string(),
        pairs,
        summary,
        note: EMBEDDING_NOTE.to_string(),
        warnings,
    }
}
