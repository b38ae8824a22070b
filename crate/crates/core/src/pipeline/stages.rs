use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{AmeKind, FdrFamily, PipelineError};
use crate::agreement::{build_robust_subset, summarize, AgreementSummary};
use crate::datamodel::{parse_manifest, AnnotationTable, BinaryLabel, ImageRecord, Manifest};
use crate::highlevel::{load_detection, HighLevelIndicators, NounMatch};
use crate::judge::{
    Judge, JudgeRequest, Mode, Parsed, PromptConfig, RationaleRequest, RationaleVariant, Rationale, RequestStatus,
};
use crate::lowlevel::{extract_low_level, RgbImage};
use crate::midlevel::{extract_mid_level, load_saliency, MidLevelConfig};
use crate::report::{
    confusion, human_group_means, prediction_group_means, prf1, round2, similarity_report, ConfusionCounts,
    FeatureValues, GroupSummary, MetricRow, SimReport, FEATURE_NAMES,
};
use crate::stats::{ame_discrete, covariance, effect_table, fit_logit, pct_change, stars, bh_fdr, CovKind, EffectEstimate};
use crate::Error;

pub const HUMAN: &str = "human";
pub const DESIGN_TERMS: [&str; 3] = ["intercept", "keyobj", "human"];

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| PipelineError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    write_atomic(path, serde_json::to_string_pretty(value).expect("serializable") + "\n")
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Format { path: path.display().to_string(), message: e.to_string() })
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("serializable"));
        out.push('\n');
    }
    write_atomic(path, out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Format {
                path: format!("{}:{}", path.display(), i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> PipelineError {
    PipelineError::Format { path: path.display().to_string(), message: e.to_string() }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: Option<&[&str]>) -> Result<(), PipelineError> {
    let mut w = csv::WriterBuilder::new().has_headers(header.is_none()).from_writer(Vec::new());
    if let Some(h) = header {
        w.write_record(h).map_err(|e| csv_error(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| PipelineError::Format { path: path.display().to_string(), message: e.to_string() })?;
    write_atomic(path, bytes)
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

/// A manifest plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub base_dir: PathBuf,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self, Error> {
        let manifest = parse_manifest(manifest_path)?;
        let base_dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Dataset { manifest, base_dir })
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Copy of a record with every file path made absolute.
    pub fn resolved(&self, rec: &ImageRecord) -> ImageRecord {
        let fix = |s: &str| self.resolve(s).to_string_lossy().into_owned();
        let mut r = rec.clone();
        r.image_path = fix(&rec.image_path);
        r.saliency_path = rec.saliency_path.as_deref().map(fix);
        r.detection_path = rec.detection_path.as_deref().map(fix);
        r
    }

    /// Loads every record's detection file. Missing or invalid files are
    /// skipped with a warning.
    pub fn detections(&self, min_score: Option<f64>, warnings: &mut Vec<String>) -> HashMap<String, HighLevelIndicators> {
        let mut out = HashMap::new();
        for rec in self.manifest.iter() {
            match self.detection(rec, min_score) {
                Ok(Some((det, w))) => {
                    warnings.extend(w);
                    out.insert(rec.id.clone(), det);
                }
                Ok(None) => {}
                Err(w) => warnings.push(w),
            }
        }
        out
    }

    fn detection(
        &self,
        rec: &ImageRecord,
        min_score: Option<f64>,
    ) -> Result<Option<(HighLevelIndicators, Vec<String>)>, String> {
        let Some(p) = rec.detection_path.as_deref() else { return Ok(None) };
        let mut det = load_detection(&self.resolve(p)).map_err(|e| format!("{}: detection unavailable: {e}", rec.id))?;
        if let Some(s) = min_score {
            det.filter_min_score(s);
        }
        let w = det.warnings.iter().map(|w| format!("{}: {w}", rec.id)).collect();
        Ok(Some((det, w)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureSettings {
    pub bins_per_axis: usize,
    pub mid: MidLevelConfig,
    pub min_score: Option<f64>,
}

/// One features.csv row. Empty cells mark inputs that were missing or unreadable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub id: String,
    pub colorfulness: Option<f64>,
    pub color_entropy_bits: Option<f64>,
    pub brightness: Option<f64>,
    pub a_at_p: Option<f64>,
    pub h_sal: Option<f64>,
    pub cbi: Option<f64>,
    pub t3: Option<f64>,
    pub keyobj: Option<u8>,
    pub human: Option<u8>,
}

impl FeatureRow {
    pub fn values(&self) -> FeatureValues {
        FeatureValues {
            id: self.id.clone(),
            values: [
                self.colorfulness,
                self.color_entropy_bits,
                self.brightness,
                self.a_at_p,
                self.h_sal,
                self.cbi,
                self.t3,
            ],
        }
    }
}

fn feature_row(ds: &Dataset, rec: &ImageRecord, s: &FeatureSettings) -> (FeatureRow, Vec<String>) {
    let mut warnings = Vec::new();
    let mut row = FeatureRow {
        id: rec.id.clone(),
        colorfulness: None,
        color_entropy_bits: None,
        brightness: None,
        a_at_p: None,
        h_sal: None,
        cbi: None,
        t3: None,
        keyobj: None,
        human: None,
    };
    match RgbImage::open(&ds.resolve(&rec.image_path)).and_then(|img| extract_low_level(&img, s.bins_per_axis)) {
        Ok(low) => {
            row.colorfulness = Some(low.colorfulness);
            row.color_entropy_bits = Some(low.color_entropy_bits);
            row.brightness = Some(low.brightness);
        }
        Err(e) => warnings.push(format!("{}: low-level features unavailable: {e}", rec.id)),
    }
    match rec.saliency_path.as_deref() {
        None => warnings.push(format!("{}: no saliency map; mid-level features left empty", rec.id)),
        Some(p) => match load_saliency(&ds.resolve(p), None).and_then(|m| extract_mid_level(&m, &s.mid)) {
            Ok(mid) => {
                row.a_at_p = Some(mid.a_at_p);
                row.h_sal = Some(mid.h_sal);
                row.cbi = Some(mid.cbi);
                row.t3 = Some(mid.t3);
            }
            Err(e) => warnings.push(format!("{}: mid-level features unavailable: {e}", rec.id)),
        },
    }
    match ds.detection(rec, s.min_score) {
        Ok(Some((det, w))) => {
            row.keyobj = Some(det.x_obj);
            row.human = Some(det.x_hum);
            warnings.extend(w);
        }
        Ok(None) => warnings.push(format!("{}: no detection record; high-level features left empty", rec.id)),
        Err(w) => warnings.push(w),
    }
    (row, warnings)
}

/// Per-image features in manifest order, computed in parallel.
pub fn compute_features(ds: &Dataset, settings: &FeatureSettings) -> (Vec<FeatureRow>, Vec<String>) {
    let results: Vec<(FeatureRow, Vec<String>)> =
        ds.manifest.records().par_iter().map(|rec| feature_row(ds, rec, settings)).collect();
    let mut warnings = Vec::new();
    let rows = results
        .into_iter()
        .map(|(r, w)| {
            warnings.extend(w);
            r
        })
        .collect();
    (rows, warnings)
}

pub const FEATURE_COLUMNS: [&str; 10] =
    ["id", "colorfulness", "color_entropy_bits", "brightness", "a_at_p", "h_sal", "cbi", "t3", "keyobj", "human"];

pub fn write_features_csv(path: &Path, rows: &[FeatureRow]) -> Result<(), PipelineError> {
    if rows.is_empty() {
        return write_atomic(path, FEATURE_COLUMNS.join(",") + "\n");
    }
    write_csv(path, rows, None)
}

pub fn read_features_csv(path: &Path) -> Result<Vec<FeatureRow>, PipelineError> {
    read_csv(path)
}

/// One labels.csv row: `model` is `human` for reference labels or a run id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub id: String,
    #[serde(default = "human_model")]
    pub model: String,
    pub label: BinaryLabel,
}

fn human_model() -> String {
    HUMAN.to_string()
}

pub fn write_labels_csv(path: &Path, rows: &[LabelRow]) -> Result<(), PipelineError> {
    if rows.is_empty() {
        return write_atomic(path, "id,model,label\n");
    }
    write_csv(path, rows, None)
}

/// Reads `id,model,label` (or `id,label`, taken as human) rows.
pub fn read_labels_csv(path: &Path) -> Result<Vec<LabelRow>, PipelineError> {
    read_csv(path)
}

/// Groups label rows by `model`, in first-appearance order.
pub fn label_blocks(rows: &[LabelRow]) -> IndexMap<String, Vec<(String, BinaryLabel)>> {
    let mut out: IndexMap<String, Vec<(String, BinaryLabel)>> = IndexMap::new();
    for r in rows {
        out.entry(r.model.clone()).or_default().push((r.id.clone(), r.label));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementArtifact {
    /// `annotations` when labels come from the robust subset, `manifest` otherwise.
    pub label_source: String,
    pub summary: Option<AgreementSummary>,
    pub duplicate_paths_dropped: Vec<String>,
    pub not_in_manifest: Vec<String>,
    pub evaluated: usize,
    pub evaluated_high: usize,
    pub evaluated_low: usize,
}

/// Reference labels for evaluation, in manifest order. With annotations the
/// robust subset decides; otherwise manifest labels are used.
pub fn evaluation_labels(ds: &Dataset, annotations: Option<&AnnotationTable>) -> Result<(AgreementArtifact, Vec<LabelRow>), Error> {
    let (label_of, summary, dropped, orphan): (HashMap<String, BinaryLabel>, _, _, _) = match annotations {
        Some(table) => {
            let summary = summarize(table)?;
            let (subset, dropped) = build_robust_subset(table)?.dedup_by_path(&ds.manifest);
            let orphan: Vec<String> =
                subset.kept.iter().filter(|k| ds.manifest.get(&k.image_id).is_none()).map(|k| k.image_id.clone()).collect();
            let map = subset.kept.iter().map(|k| (k.image_id.clone(), k.label)).collect();
            (map, Some(summary), dropped, orphan)
        }
        None => {
            let map = ds.manifest.iter().filter_map(|r| r.label.map(|l| (r.id.clone(), l))).collect();
            (map, None, Vec::new(), Vec::new())
        }
    };
    let rows: Vec<LabelRow> = ds
        .manifest
        .iter()
        .filter_map(|r| label_of.get(&r.id).map(|&label| LabelRow { id: r.id.clone(), model: human_model(), label }))
        .collect();
    let high = rows.iter().filter(|r| r.label.is_high()).count();
    let artifact = AgreementArtifact {
        label_source: if annotations.is_some() { "annotations" } else { "manifest" }.to_string(),
        summary,
        duplicate_paths_dropped: dropped,
        not_in_manifest: orphan,
        evaluated: rows.len(),
        evaluated_high: high,
        evaluated_low: rows.len() - high,
    };
    Ok((artifact, rows))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgeSettings {
    pub model_name: String,
    pub reasoning_effort: Option<String>,
    pub prompt_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleRow {
    pub id: String,
    pub variant: RationaleVariant,
    pub model: String,
    pub per_object: IndexMap<String, String>,
    pub rationale_overall: String,
    pub label_informed: bool,
    pub warnings: Vec<String>,
}

impl RationaleRow {
    pub fn rationale(&self) -> Rationale {
        Rationale {
            per_object: self.per_object.clone(),
            rationale_overall: self.rationale_overall.clone(),
            label_informed: self.label_informed,
        }
    }
}

fn first_error<T>(what: &str, results: &[Result<T, crate::judge::JudgeError>], ids: &[String]) -> Option<PipelineError> {
    let failed: Vec<String> = results
        .iter()
        .zip(ids)
        .filter_map(|(r, id)| r.as_ref().err().map(|e| format!("{id}: {e}")))
        .collect();
    (!failed.is_empty()).then(|| PipelineError::Requests {
        what: what.to_string(),
        failed: failed.len(),
        total: results.len(),
        first: failed[0].clone(),
    })
}

/// Rationales for every labelled record with at least one detected key object.
pub fn generate_rationales(
    judge: &Judge<'_>,
    ds: &Dataset,
    labels: &[LabelRow],
    detections: &HashMap<String, HighLevelIndicators>,
    variant: RationaleVariant,
    settings: &JudgeSettings,
    on_done: &(dyn Fn(&RequestStatus) + Sync),
) -> Result<Vec<RationaleRow>, Error> {
    let requests: Vec<RationaleRequest> = labels
        .iter()
        .filter_map(|l| {
            let rec = ds.manifest.get(&l.id)?;
            let nouns: Vec<String> = detections.get(&l.id)?.matched_nouns().into_iter().map(str::to_string).collect();
            (!nouns.is_empty()).then(|| RationaleRequest {
                record: ds.resolved(rec),
                variant,
                model_name: settings.model_name.clone(),
                reasoning_effort: settings.reasoning_effort.clone(),
                prompt_version: settings.prompt_version.clone(),
                key_objects: nouns,
                label: (variant == RationaleVariant::Informed).then_some(l.label),
            })
        })
        .collect();
    let results = judge.generate_all(&requests, on_done);
    let ids: Vec<String> = requests.iter().map(|r| r.record.id.clone()).collect();
    if let Some(e) = first_error("rationale generation", &results, &ids) {
        return Err(e.into());
    }
    Ok(results
        .into_iter()
        .zip(requests)
        .map(|(r, req)| {
            let (rat, warnings, _) = r.expect("errors handled above");
            RationaleRow {
                id: req.record.id,
                variant,
                model: settings.model_name.clone(),
                per_object: rat.per_object,
                rationale_overall: rat.rationale_overall,
                label_informed: rat.label_informed,
                warnings,
            }
        })
        .collect())
}

/// One prediction row. Raw text is kept so a run can be re-parsed offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredRow {
    pub id: String,
    pub run_id: String,
    pub mode: Mode,
    pub rationale_variant: Option<RationaleVariant>,
    pub model: String,
    pub parsed: Parsed,
    pub raw_text: String,
    pub reasoning_text: Option<String>,
    pub latency_ms: u64,
    pub cache_key: String,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub run_id: String,
    pub mode: Mode,
    pub variant: Option<RationaleVariant>,
}

impl RunSpec {
    pub fn new(mode: Mode, variant: Option<RationaleVariant>) -> Self {
        let run_id = match variant {
            Some(v) if mode == Mode::KeyObjectRationale => format!("{mode}_{v}"),
            _ => mode.to_string(),
        };
        RunSpec { run_id, mode, variant: variant.filter(|_| mode == Mode::KeyObjectRationale) }
    }
}

/// Judges the records named by `ids` under one prompt configuration.
#[allow(clippy::too_many_arguments)]
pub fn judge_run(
    judge: &Judge<'_>,
    ds: &Dataset,
    ids: &[String],
    run: &RunSpec,
    detections: &HashMap<String, HighLevelIndicators>,
    rationales: &HashMap<String, Rationale>,
    settings: &JudgeSettings,
    on_done: &(dyn Fn(&RequestStatus) + Sync),
) -> Result<Vec<PredRow>, Error> {
    let mut config = PromptConfig::new(run.mode, settings.model_name.clone());
    config.rationale_variant = run.variant;
    config.reasoning_effort = settings.reasoning_effort.clone();
    config.prompt_version = settings.prompt_version.clone();
    config.validate()?;
    let requests: Vec<JudgeRequest> = ids
        .iter()
        .filter_map(|id| ds.manifest.get(id))
        .map(|rec| {
            let mut req = JudgeRequest::new(ds.resolved(rec), config.clone());
            if run.mode == Mode::AlignedKeyObjectContext {
                req.key_objects = detections.get(&rec.id).map(|d| d.matches.clone()).filter(|m: &Vec<NounMatch>| !m.is_empty());
            }
            if run.mode == Mode::KeyObjectRationale {
                req.rationale = rationales.get(&rec.id).cloned();
            }
            req
        })
        .collect();
    let results = judge.judge_all(&requests, on_done);
    let ids: Vec<String> = requests.iter().map(|r| r.record.id.clone()).collect();
    if let Some(e) = first_error(&format!("judge run {}", run.run_id), &results, &ids) {
        return Err(e.into());
    }
    Ok(results
        .into_iter()
        .zip(ids)
        .map(|(r, id)| {
            let r = r.expect("errors handled above");
            PredRow {
                id,
                run_id: run.run_id.clone(),
                mode: run.mode,
                rationale_variant: run.variant,
                model: settings.model_name.clone(),
                parsed: r.parsed,
                raw_text: r.raw_text,
                reasoning_text: r.reasoning_text,
                latency_ms: r.latency_ms,
                cache_key: r.cache_key,
                degraded: r.degraded,
            }
        })
        .collect())
}

/// Parsed predictions, Unparseable rows dropped.
pub fn parsed_predictions(rows: &[PredRow]) -> Vec<(String, BinaryLabel)> {
    rows.iter().filter_map(|r| r.parsed.label().map(|l| (r.id.clone(), l))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    #[serde(flatten)]
    pub estimate: EffectEstimate,
    /// Percent change of this odds ratio against the human-label block.
    pub pct_change_vs_human: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectBlock {
    pub outcome: String,
    pub n: usize,
    pub n_high: usize,
    pub dropped_missing_design: usize,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    pub log_likelihood: Option<f64>,
    pub error: Option<String>,
    pub effects: Vec<EffectRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectsReport {
    pub terms: Vec<String>,
    pub covariance: String,
    pub fdr_family: FdrFamily,
    pub ame: AmeKind,
    pub blocks: Vec<EffectBlock>,
}

fn fit_block(
    outcome: &str,
    design: &HashMap<&str, (u8, u8)>,
    labels: &[(String, BinaryLabel)],
    ame: AmeKind,
) -> EffectBlock {
    let rows: Vec<((u8, u8), f64)> = labels
        .iter()
        .filter_map(|(id, l)| design.get(id.as_str()).map(|&x| (x, if l.is_high() { 1.0 } else { 0.0 })))
        .collect();
    let mut block = EffectBlock {
        outcome: outcome.to_string(),
        n: rows.len(),
        n_high: rows.iter().filter(|r| r.1 == 1.0).count(),
        dropped_missing_design: labels.len() - rows.len(),
        converged: None,
        iterations: None,
        log_likelihood: None,
        error: None,
        effects: Vec::new(),
    };
    let x = DMatrix::from_fn(rows.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => f64::from(rows[i].0 .0),
        _ => f64::from(rows[i].0 .1),
    });
    let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let terms: Vec<String> = DESIGN_TERMS.iter().map(|t| t.to_string()).collect();
    let result = fit_logit(&x, &y, &terms).and_then(|fit| {
        let cov = covariance(&fit, &x, CovKind::Hc3)?;
        let mut table = effect_table(&fit, &cov)?;
        if ame == AmeKind::Discrete {
            for (row, a) in table.iter_mut().zip(ame_discrete(&fit, &x)) {
                row.ame = a;
            }
        }
        Ok((fit, table))
    });
    match result {
        Ok((fit, table)) => {
            block.converged = Some(fit.converged);
            block.iterations = Some(fit.iterations);
            block.log_likelihood = Some(fit.log_likelihood);
            block.effects = table.into_iter().map(|estimate| EffectRow { estimate, pct_change_vs_human: None }).collect();
        }
        Err(e) => block.error = Some(e.to_string()),
    }
    block
}

/// Fits the key-object/human-presence logit for every outcome block. Failed
/// fits are reported in the block's `error` field.
pub fn fit_outcomes(
    features: &[FeatureRow],
    outcomes: &IndexMap<String, Vec<(String, BinaryLabel)>>,
    family: FdrFamily,
    ame: AmeKind,
) -> Result<EffectsReport, Error> {
    let design: HashMap<&str, (u8, u8)> = features
        .iter()
        .filter_map(|f| Some((f.id.as_str(), (f.keyobj?, f.human?))))
        .collect();
    let mut blocks: Vec<EffectBlock> = outcomes.iter().map(|(name, labels)| fit_block(name, &design, labels, ame)).collect();
    if family == FdrFamily::Global {
        let slots: Vec<(usize, usize)> = blocks
            .iter()
            .enumerate()
            .flat_map(|(b, blk)| {
                blk.effects.iter().enumerate().filter(|(_, e)| e.estimate.ame.is_some()).map(move |(j, _)| (b, j))
            })
            .collect();
        if !slots.is_empty() {
            let adj = bh_fdr(&slots.iter().map(|&(b, j)| blocks[b].effects[j].estimate.p_value).collect::<Vec<_>>())?;
            for (&(b, j), a) in slots.iter().zip(adj) {
                let e = &mut blocks[b].effects[j].estimate;
                e.p_fdr = a;
                e.stars = stars(a).to_string();
            }
        }
    }
    let human: HashMap<String, f64> = blocks
        .iter()
        .find(|b| b.outcome == HUMAN)
        .map(|b| b.effects.iter().map(|e| (e.estimate.term.clone(), e.estimate.odds_ratio)).collect())
        .unwrap_or_default();
    for blk in blocks.iter_mut().filter(|b| b.outcome != HUMAN) {
        for e in blk.effects.iter_mut().filter(|e| e.estimate.ame.is_some()) {
            e.pct_change_vs_human = human.get(&e.estimate.term).and_then(|&h| pct_change(e.estimate.odds_ratio, h).ok());
        }
    }
    Ok(EffectsReport {
        terms: DESIGN_TERMS.iter().map(|t| t.to_string()).collect(),
        covariance: "HC3".into(),
        fdr_family: family,
        ame,
        blocks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: String,
    pub mode: Option<Mode>,
    pub rationale_variant: Option<RationaleVariant>,
    pub model: Option<String>,
    pub n_requests: usize,
    pub n_high: usize,
    pub n_low: usize,
    pub n_unparseable: usize,
    pub unparseable_rate: f64,
    pub n_degraded: usize,
    pub counts: Option<ConfusionCounts>,
    pub metrics: Option<MetricRow>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub reference: String,
    pub baseline_run: String,
    pub runs: Vec<RunMetrics>,
    pub warnings: Vec<String>,
}

pub fn run_metrics(run_id: &str, preds: &[PredRow], labels: &HashMap<String, BinaryLabel>) -> RunMetrics {
    let count = |p: Parsed| preds.iter().filter(|r| r.parsed == p).count();
    let parsed = parsed_predictions(preds);
    let (counts, metrics, error) = match confusion(&parsed, labels) {
        Ok(c) => (Some(c), Some(prf1(&c)), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    let n_unparseable = count(Parsed::Unparseable);
    RunMetrics {
        run_id: run_id.to_string(),
        mode: preds.first().map(|p| p.mode),
        rationale_variant: preds.first().and_then(|p| p.rationale_variant),
        model: preds.first().map(|p| p.model.clone()),
        n_requests: preds.len(),
        n_high: count(Parsed::High),
        n_low: count(Parsed::Low),
        n_unparseable,
        unparseable_rate: if preds.is_empty() { 0.0 } else { n_unparseable as f64 / preds.len() as f64 },
        n_degraded: preds.iter().filter(|p| p.degraded).count(),
        counts,
        metrics,
        error,
    }
}

/// Metrics per run with ΔF1 against `baseline_run` when it is present.
pub fn metrics_report(
    runs: &IndexMap<String, Vec<PredRow>>,
    labels: &[LabelRow],
    baseline_run: &str,
) -> MetricsReport {
    let truth: HashMap<String, BinaryLabel> = labels.iter().map(|l| (l.id.clone(), l.label)).collect();
    let mut rows: Vec<RunMetrics> = runs.iter().map(|(id, p)| run_metrics(id, p, &truth)).collect();
    let mut warnings = Vec::new();
    let base_f1 = rows.iter().find(|r| r.run_id == baseline_run).and_then(|r| r.metrics.as_ref()).map(|m| m.f1);
    match base_f1 {
        Some(b) => {
            for r in rows.iter_mut().filter(|r| r.run_id != baseline_run) {
                if let Some(m) = &mut r.metrics {
                    m.delta_f1 = Some(round2(m.f1 - b));
                }
            }
        }
        None if !runs.is_empty() => warnings.push(format!("baseline run `{baseline_run}` has no metrics; delta_f1 omitted")),
        None => {}
    }
    for r in &rows {
        if r.n_unparseable > 0 {
            warnings.push(format!("run `{}`: {} unparseable responses excluded", r.run_id, r.n_unparseable));
        }
    }
    MetricsReport { reference: HUMAN.into(), baseline_run: baseline_run.to_string(), runs: rows, warnings }
}

/// Human groups followed by prediction and error-type groups per run.
pub fn group_summaries(
    features: &[FeatureRow],
    labels: &[LabelRow],
    runs: &IndexMap<String, Vec<PredRow>>,
    warnings: &mut Vec<String>,
) -> Result<Vec<GroupSummary>, Error> {
    let values: Vec<FeatureValues> = features.iter().map(FeatureRow::values).collect();
    let pairs: Vec<(String, BinaryLabel)> = labels.iter().map(|l| (l.id.clone(), l.label)).collect();
    let truth: HashMap<String, BinaryLabel> = pairs.iter().cloned().collect();
    let mut out = human_group_means(&values, &pairs, warnings)?;
    for (run_id, preds) in runs {
        out.extend(prediction_group_means(run_id, &values, &parsed_predictions(preds), &truth, warnings)?);
    }
    Ok(out)
}

pub fn write_groups_csv(path: &Path, groups: &[GroupSummary]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["group", "model", "n"];
    header.extend(FEATURE_NAMES);
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for g in groups {
        let mut rec = vec![g.group.to_string(), g.model.clone().unwrap_or_default(), g.n.to_string()];
        rec.extend(FEATURE_NAMES.iter().map(|f| g.means.get(*f).copied().flatten().map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| PipelineError::Format { path: path.display().to_string(), message: e.to_string() })?;
    write_atomic(path, bytes)
}

type RationaleSet = IndexMap<String, (String, IndexMap<String, String>)>;

fn rationale_set(rows: &[RationaleRow]) -> RationaleSet {
    rows.iter().map(|r| (r.id.clone(), (r.rationale_overall.clone(), r.per_object.clone()))).collect()
}

/// Agnostic rationales scored against informed ones. Missing sets yield an
/// empty report with a warning.
pub fn rationale_similarity(
    agnostic: Option<&[RationaleRow]>,
    informed: Option<&[RationaleRow]>,
) -> SimReport {
    let (a, i) = (RationaleVariant::Agnostic.as_str(), RationaleVariant::Informed.as_str());
    match (agnostic, informed) {
        (Some(c), Some(r)) => similarity_report(a, i, &rationale_set(c), &rationale_set(r)),
        _ => {
            let mut rep = similarity_report(a, i, &IndexMap::new(), &IndexMap::new());
            rep.warnings.push("similarity needs both agnostic and informed rationales; none compared".into());
            rep
        }
    }
}

/// Append-only JSON-lines log, flushed per line.
pub struct AppendLog {
    file: std::sync::Mutex<fs::File>,
}

impl AppendLog {
    pub fn open(path: &Path) -> Result<Self, PipelineError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        }
        let file = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| PipelineError::io(path, e))?;
        Ok(AppendLog { file: std::sync::Mutex::new(file) })
    }

    pub fn append<T: Serialize>(&self, value: &T) {
        let mut line = serde_json::to_string(value).expect("serializable");
        line.push('\n');
        let mut f = self.file.lock().expect("log lock");
        if let Err(e) = f.write_all(line.as_bytes()).and_then(|_| f.flush()) {
            log::warn!("request log write failed: {e}");
        }
    }
}
