//! Stage-sequential pipeline driven by a [`RunConfig`], with a resumable
//! ledger recording which stages have completed.

mod config;
mod stages;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::datamodel::parse_annotations;
use crate::judge::{ChatBackend, HttpChatClient, HttpConfig, Judge, Mode, RationaleVariant, RequestStatus, ResponseCache};
use crate::Error;

pub use config::{load_config, validate_config, AmeKind, FdrFamily, RunConfig};
pub use stages::*;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{what}: {failed} of {total} requests failed; first: {first}")]
    Requests { what: String, failed: usize, total: usize, first: String },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.display().to_string(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Features,
    Agreement,
    RationaleGen,
    Judge,
    Fit,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Features, Stage::Agreement, Stage::RationaleGen, Stage::Judge, Stage::Fit, Stage::Report];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Features => "features",
            Stage::Agreement => "agreement",
            Stage::RationaleGen => "rationale-gen",
            Stage::Judge => "judge",
            Stage::Fit => "fit",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const LEDGER_FILE: &str = "run_ledger.json";
pub const REQUEST_LOG_FILE: &str = "requests.jsonl";
pub const FEATURES_FILE: &str = "features.csv";
pub const AGREEMENT_FILE: &str = "agreement.json";
pub const LABELS_FILE: &str = "labels.csv";
pub const EFFECTS_FILE: &str = "effects.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const GROUPS_FILE: &str = "groups.csv";
pub const SIM_FILE: &str = "sim.json";

pub fn preds_file(run_id: &str) -> String {
    format!("preds_{run_id}.jsonl")
}

pub fn rationale_file(variant: RationaleVariant) -> String {
    format!("rationales_{variant}.jsonl")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub done: bool,
    pub artifacts: Vec<String>,
    pub requests: usize,
    pub cache_hits: usize,
    pub warnings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub run_id: String,
    pub config_digest: String,
    /// Seed for retry jitter.
    pub seed: u64,
    pub model_name: String,
    /// Sampling parameters are left to the endpoint.
    pub sampling: String,
    pub stages: IndexMap<String, StageRecord>,
}

impl RunLedger {
    pub fn fresh(config_digest: &str, cfg: &RunConfig) -> Self {
        RunLedger {
            run_id: config_digest[..16].to_string(),
            config_digest: config_digest.to_string(),
            seed: cfg.seed,
            model_name: cfg.model_name.clone(),
            sampling: "endpoint defaults".into(),
            stages: Stage::ALL.iter().map(|s| (s.to_string(), StageRecord::default())).collect(),
        }
    }

    /// Loads the ledger in `out_dir` if it matches `config_digest`, otherwise
    /// starts a fresh one.
    pub fn load_or_fresh(out_dir: &Path, config_digest: &str, cfg: &RunConfig) -> Self {
        match read_json::<RunLedger>(&out_dir.join(LEDGER_FILE)) {
            Ok(l) if l.config_digest == config_digest => l,
            Ok(_) => {
                log::info!("config changed since the last run; starting a fresh ledger");
                RunLedger::fresh(config_digest, cfg)
            }
            Err(_) => RunLedger::fresh(config_digest, cfg),
        }
    }

    pub fn stage(&self, s: Stage) -> Option<&StageRecord> {
        self.stages.get(s.as_str())
    }

    /// True when the stage is marked done and every artifact it wrote still exists.
    pub fn is_complete(&self, s: Stage, out_dir: &Path) -> bool {
        self.stage(s).is_some_and(|r| r.done && r.artifacts.iter().all(|a| out_dir.join(a).is_file()))
    }

    pub fn save(&self, out_dir: &Path) -> Result<(), PipelineError> {
        write_json(&out_dir.join(LEDGER_FILE), self)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub force: bool,
    pub dry_run: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub stage: Stage,
    /// `run`, `skip` (complete in the ledger) or `not-needed`.
    pub action: String,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub out_dir: PathBuf,
    pub plan: Vec<PlanStep>,
    pub network_calls: usize,
    pub cache_hits: usize,
    pub warnings: Vec<String>,
}

fn stage_artifacts(cfg: &RunConfig, s: Stage) -> Vec<String> {
    match s {
        Stage::Features => vec![FEATURES_FILE.into()],
        Stage::Agreement => vec![AGREEMENT_FILE.into(), LABELS_FILE.into()],
        Stage::RationaleGen => rationale_variants_needed(cfg).into_iter().map(rationale_file).collect(),
        Stage::Judge => cfg.run_ids().into_iter().map(|(id, _, _)| preds_file(&id)).collect(),
        Stage::Fit => vec![EFFECTS_FILE.into()],
        Stage::Report => vec![METRICS_FILE.into(), GROUPS_FILE.into(), SIM_FILE.into()],
    }
}

fn rationale_variants_needed(cfg: &RunConfig) -> Vec<RationaleVariant> {
    if cfg.modes.contains(&Mode::KeyObjectRationale) {
        cfg.rationale_variants.clone()
    } else {
        Vec::new()
    }
}

/// Per-stage actions for the current ledger state.
pub fn plan(cfg: &RunConfig, ledger: &RunLedger, force: bool) -> Vec<PlanStep> {
    Stage::ALL
        .iter()
        .map(|&s| {
            let artifacts = stage_artifacts(cfg, s);
            let action = if artifacts.is_empty() {
                "not-needed"
            } else if !force && ledger.is_complete(s, &cfg.out_dir) {
                "skip"
            } else {
                "run"
            };
            PlanStep { stage: s, action: action.into(), artifacts }
        })
        .collect()
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    ds: Dataset,
    judge: Judge<'a>,
    log: AppendLog,
    settings: JudgeSettings,
    network: AtomicUsize,
    hits: AtomicUsize,
}

impl Ctx<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn labels(&self) -> Result<Vec<LabelRow>, PipelineError> {
        read_labels_csv(&self.out(LABELS_FILE))
    }

    fn preds(&self) -> Result<IndexMap<String, Vec<PredRow>>, PipelineError> {
        self.cfg.run_ids().into_iter().map(|(id, _, _)| Ok((id.clone(), read_jsonl(&self.out(&preds_file(&id)))?))).collect()
    }

    fn rationales(&self, v: RationaleVariant) -> Result<Option<Vec<RationaleRow>>, PipelineError> {
        let p = self.out(&rationale_file(v));
        if p.is_file() {
            read_jsonl(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    fn on_done(&self, stage: Stage, run: &str) -> impl Fn(&RequestStatus) + Sync + '_ {
        let run = run.to_string();
        move |s: &RequestStatus| {
            if s.cache_hit {
                self.hits.fetch_add(1, Ordering::Relaxed);
            } else if s.ok {
                self.network.fetch_add(1, Ordering::Relaxed);
            }
            self.log.append(&serde_json::json!({"stage": stage, "run": run, "status": s}));
        }
    }

    /// Runs one stage; returns (requests, cache hits, warnings).
    fn run_stage(&self, stage: Stage) -> Result<(usize, usize, Vec<String>), Error> {
        let mut warnings = Vec::new();
        let before = (self.network.load(Ordering::Relaxed), self.hits.load(Ordering::Relaxed));
        match stage {
            Stage::Features => {
                let settings = FeatureSettings {
                    bins_per_axis: self.cfg.bins_per_axis,
                    mid: self.cfg.mid_level(),
                    min_score: self.cfg.min_score,
                };
                let (rows, w) = compute_features(&self.ds, &settings);
                warnings.extend(w);
                write_features_csv(&self.out(FEATURES_FILE), &rows)?;
            }
            Stage::Agreement => {
                let table = self.cfg.annotations_path.as_deref().map(parse_annotations).transpose()?;
                let (artifact, rows) = evaluation_labels(&self.ds, table.as_ref())?;
                if rows.is_empty() {
                    warnings.push("no labelled records to evaluate".into());
                }
                write_json(&self.out(AGREEMENT_FILE), &artifact)?;
                write_labels_csv(&self.out(LABELS_FILE), &rows)?;
            }
            Stage::RationaleGen => {
                let labels = self.labels()?;
                let detections = self.ds.detections(self.cfg.min_score, &mut warnings);
                for v in rationale_variants_needed(self.cfg) {
                    let rows = generate_rationales(
                        &self.judge,
                        &self.ds,
                        &labels,
                        &detections,
                        v,
                        &self.settings,
                        &self.on_done(stage, v.as_str()),
                    )?;
                    warnings.extend(rows.iter().flat_map(|r| r.warnings.iter().map(|w| format!("{}: {w}", r.id))));
                    write_jsonl(&self.out(&rationale_file(v)), &rows)?;
                }
            }
            Stage::Judge => {
                let ids: Vec<String> = self.labels()?.into_iter().map(|l| l.id).collect();
                let detections = self.ds.detections(self.cfg.min_score, &mut Vec::new());
                for (run_id, mode, variant) in self.cfg.run_ids() {
                    let rationales: HashMap<String, crate::judge::Rationale> = match variant {
                        Some(v) => self
                            .rationales(v)?
                            .unwrap_or_default()
                            .into_iter()
                            .map(|r| (r.id.clone(), r.rationale()))
                            .collect(),
                        None => HashMap::new(),
                    };
                    let run = RunSpec::new(mode, variant);
                    let rows = judge_run(
                        &self.judge,
                        &self.ds,
                        &ids,
                        &run,
                        &detections,
                        &rationales,
                        &self.settings,
                        &self.on_done(stage, &run_id),
                    )?;
                    let degraded = rows.iter().filter(|r| r.degraded).count();
                    if degraded > 0 {
                        warnings.push(format!("run `{run_id}`: {degraded} requests fell back to the baseline prompt"));
                    }
                    write_jsonl(&self.out(&preds_file(&run_id)), &rows)?;
                }
            }
            Stage::Fit => {
                let features = read_features_csv(&self.out(FEATURES_FILE))?;
                let mut outcomes = label_blocks(&self.labels()?);
                for (run_id, preds) in self.preds()? {
                    outcomes.insert(run_id, parsed_predictions(&preds));
                }
                let report = fit_outcomes(&features, &outcomes, self.cfg.fdr_family, self.cfg.ame)?;
                warnings.extend(report.blocks.iter().filter_map(|b| b.error.as_ref().map(|e| format!("fit `{}`: {e}", b.outcome))));
                write_json(&self.out(EFFECTS_FILE), &report)?;
            }
            Stage::Report => {
                let features = read_features_csv(&self.out(FEATURES_FILE))?;
                let labels = self.labels()?;
                let runs = self.preds()?;
                let mut metrics = metrics_report(&runs, &labels, &self.cfg.baseline_run);
                let groups = group_summaries(&features, &labels, &runs, &mut metrics.warnings)?;
                let sim = rationale_similarity(
                    self.rationales(RationaleVariant::Agnostic)?.as_deref(),
                    self.rationales(RationaleVariant::Informed)?.as_deref(),
                );
                warnings.extend(metrics.warnings.iter().cloned());
                warnings.extend(sim.warnings.iter().cloned());
                write_json(&self.out(METRICS_FILE), &metrics)?;
                write_groups_csv(&self.out(GROUPS_FILE), &groups)?;
                write_json(&self.out(SIM_FILE), &sim)?;
            }
        }
        let net = self.network.load(Ordering::Relaxed) - before.0;
        let hits = self.hits.load(Ordering::Relaxed) - before.1;
        Ok((net + hits, hits, warnings))
    }
}

/// Runs every stage not already complete (all of them with `force`). A
/// failing stage halts the run; earlier stages stay marked complete.
pub fn run_pipeline(cfg: &RunConfig, opts: RunOptions) -> Result<RunSummary, PipelineError> {
    cfg.check_inputs()?;
    let digest = cfg.digest()?;
    let mut ledger = RunLedger::load_or_fresh(&cfg.out_dir, &digest, cfg);
    let steps = plan(cfg, &ledger, opts.force);
    let mut summary = RunSummary {
        run_id: ledger.run_id.clone(),
        out_dir: cfg.out_dir.clone(),
        plan: steps.clone(),
        network_calls: 0,
        cache_hits: 0,
        warnings: Vec::new(),
    };
    if opts.dry_run {
        return Ok(summary);
    }
    let tag = |stage: Stage| move |e: Error| PipelineError::Stage { stage, source: Box::new(e) };
    let ds = Dataset::load(&cfg.manifest_path).map_err(tag(Stage::Features))?;
    let cache = ResponseCache::open(&cfg.cache_dir).map_err(|e| tag(Stage::Judge)(e.into()))?;
    let client = match HttpConfig::from_env(cfg.endpoint.as_deref()) {
        Ok(mut hc) => {
            hc.seed = cfg.seed;
            Some(HttpChatClient::new(hc))
        }
        Err(_) => None,
    };
    let backend = client.as_ref().map(|c| c as &dyn ChatBackend);
    let ctx = Ctx {
        cfg,
        ds,
        judge: Judge::new(backend, &cache).with_max_in_flight(cfg.max_in_flight),
        log: AppendLog::open(&cfg.out_dir.join(REQUEST_LOG_FILE))?,
        settings: JudgeSettings {
            model_name: cfg.model_name.clone(),
            reasoning_effort: cfg.reasoning_effort.clone(),
            prompt_version: cfg.prompt_version.clone(),
        },
        network: AtomicUsize::new(0),
        hits: AtomicUsize::new(0),
    };
    for step in &steps {
        if step.action != "run" {
            continue;
        }
        log::info!("stage {} running", step.stage);
        let record = StageRecord::default();
        ledger.stages.insert(step.stage.to_string(), record);
        let (requests, hits, warnings) = ctx.run_stage(step.stage).map_err(tag(step.stage))?;
        for w in &warnings {
            log::warn!("{}: {w}", step.stage);
        }
        ledger.stages.insert(
            step.stage.to_string(),
            StageRecord { done: true, artifacts: step.artifacts.clone(), requests, cache_hits: hits, warnings: warnings.len() },
        );
        ledger.save(&cfg.out_dir)?;
        summary.warnings.extend(warnings.into_iter().map(|w| format!("{}: {w}", step.stage)));
    }
    ledger.save(&cfg.out_dir)?;
    summary.network_calls = ctx.network.load(Ordering::Relaxed);
    summary.cache_hits = ctx.hits.load(Ordering::Relaxed);
    Ok(summary)
}
