use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vpf_core::datamodel::parse_annotations;
use vpf_core::fixtures::{generate_fixture, FixtureSpec};
use vpf_core::judge::{
    ChatBackend, HttpChatClient, HttpConfig, Judge, Mode, RationaleVariant, RequestStatus, ResponseCache,
    DEFAULT_MAX_IN_FLIGHT, DEFAULT_PROMPT_VERSION,
};
use vpf_core::lowlevel::DEFAULT_BINS_PER_AXIS;
use vpf_core::midlevel::MidLevelConfig;
use vpf_core::pipeline::{
    compute_features, evaluation_labels, fit_outcomes, generate_rationales, group_summaries, judge_run, label_blocks,
    load_config, metrics_report, parsed_predictions, rationale_similarity, read_features_csv, read_jsonl,
    read_labels_csv, run_pipeline, write_features_csv, write_groups_csv, write_json, write_jsonl, write_labels_csv,
    AmeKind, Dataset, FdrFamily, FeatureSettings, JudgeSettings, PredRow, RationaleRow, RunOptions, RunSpec, GROUPS_FILE,
    HUMAN, METRICS_FILE, SIM_FILE,
};

#[derive(Parser)]
#[command(name = "vpf", version, about = "Visual persuasive factor extraction and VLM judging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-image low, mid and high-level features to CSV.
    Features(FeaturesArgs),
    /// Inter-rater agreement and the robust evaluation subset.
    Agreement(AgreementArgs),
    /// Judge records with one prompt configuration.
    Judge(JudgeArgs),
    /// Pre-generate key-object rationales.
    RationaleGen(RationaleArgs),
    /// Logistic fits of labels on key-object and human presence.
    Fit(FitArgs),
    /// Classification metrics, group means and rationale similarity.
    Report(ReportArgs),
    /// Full pipeline from a config file.
    Run(RunArgs),
    /// Write the synthetic fixture corpus.
    Fixtures(FixtureArgs),
}

#[derive(Args)]
struct MidArgs {
    #[arg(long, default_value_t = 0.85)]
    p: f64,
    #[arg(long, default_value_t = 0.20)]
    alpha: f64,
    #[arg(long, default_value_t = 0.10)]
    beta: f64,
    #[arg(long = "bins-per-axis", default_value_t = DEFAULT_BINS_PER_AXIS)]
    bins_per_axis: usize,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    mid: MidArgs,
    /// Drop detections scoring below this before deriving indicators.
    #[arg(long)]
    min_score: Option<f64>,
}

#[derive(Args)]
struct AgreementArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// Restricts the evaluation labels to records in this manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the evaluation labels (id,model,label).
    #[arg(long)]
    labels_out: Option<PathBuf>,
}

#[derive(Args)]
struct EndpointArgs {
    #[arg(long, env = "VPF_ENDPOINT")]
    endpoint: Option<String>,
    #[arg(long, default_value = "cache")]
    cache_dir: PathBuf,
    #[arg(long = "model", default_value = "gpt-5")]
    model_name: String,
    #[arg(long)]
    reasoning_effort: Option<String>,
    #[arg(long, default_value = DEFAULT_PROMPT_VERSION)]
    prompt_version: String,
    #[arg(long, default_value_t = DEFAULT_MAX_IN_FLIGHT)]
    max_in_flight: usize,
    /// Seed for retry jitter.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    min_score: Option<f64>,
}

impl EndpointArgs {
    fn settings(&self) -> JudgeSettings {
        JudgeSettings {
            model_name: self.model_name.clone(),
            reasoning_effort: self.reasoning_effort.clone(),
            prompt_version: self.prompt_version.clone(),
        }
    }

    fn client(&self) -> Option<HttpChatClient> {
        HttpConfig::from_env(self.endpoint.as_deref()).ok().map(|mut c| {
            c.seed = self.seed;
            HttpChatClient::new(c)
        })
    }
}

#[derive(Args)]
struct JudgeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    mode: Mode,
    #[arg(long)]
    rationale_variant: Option<RationaleVariant>,
    /// Rationales from `rationale-gen`, required for meaningful rationale-mode runs.
    #[arg(long)]
    rationales: Option<PathBuf>,
    /// Judge only the ids in this labels file; all manifest records otherwise.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    endpoint: EndpointArgs,
}

#[derive(Args)]
struct RationaleArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    variant: RationaleVariant,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    endpoint: EndpointArgs,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    features: PathBuf,
    /// Long-format labels: id,model,label. Each model value is fitted separately.
    #[arg(long)]
    labels: PathBuf,
    /// Prediction files whose parsed answers are fitted as extra outcomes.
    #[arg(long)]
    preds: Vec<PathBuf>,
    #[arg(long, default_value = "model")]
    family_by: FdrFamily,
    #[arg(long, value_enum, default_value = "derivative")]
    ame: AmeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AmeArg {
    Derivative,
    Discrete,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    preds: Vec<PathBuf>,
    #[arg(long)]
    rationales_agnostic: Option<PathBuf>,
    #[arg(long)]
    rationales_informed: Option<PathBuf>,
    #[arg(long, default_value = "baseline")]
    baseline_run: String,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Recompute stages already marked complete.
    #[arg(long)]
    force: bool,
    /// Validate and print the plan without running anything.
    #[arg(long)]
    dry_run: bool,
    #[arg(long, env = "VPF_ENDPOINT")]
    endpoint: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long = "model")]
    model_name: Option<String>,
    #[arg(long = "mode")]
    modes: Vec<Mode>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    n_images: usize,
    #[arg(long)]
    out: PathBuf,
}

fn progress(s: &RequestStatus) {
    match &s.error {
        Some(e) => log::warn!("request {} ({}) failed: {e}", s.index, s.id),
        None => log::debug!("request {} ({}) done, cache hit: {}", s.index, s.id, s.cache_hit),
    }
}

fn cmd_features(a: FeaturesArgs) -> Result<()> {
    let ds = Dataset::load(&a.manifest)?;
    let mid = MidLevelConfig { p: a.mid.p, alpha: a.mid.alpha, beta: a.mid.beta };
    mid.validate()?;
    let (rows, warnings) =
        compute_features(&ds, &FeatureSettings { bins_per_axis: a.mid.bins_per_axis, mid, min_score: a.min_score });
    warnings.iter().for_each(|w| log::warn!("{w}"));
    write_features_csv(&a.out, &rows)?;
    println!("wrote {} feature rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn cmd_agreement(a: AgreementArgs) -> Result<()> {
    let ds = Dataset::load(&a.manifest)?;
    let table = parse_annotations(&a.annotations)?;
    let (artifact, labels) = evaluation_labels(&ds, Some(&table))?;
    write_json(&a.out, &artifact)?;
    if let Some(p) = &a.labels_out {
        write_labels_csv(p, &labels)?;
    }
    if let Some(s) = &artifact.summary {
        println!("raw kappa {:.4}, banded kappa {:.4}", s.raw.overall_kappa, s.banded.overall_kappa);
    }
    println!("robust subset: {} high, {} low", artifact.evaluated_high, artifact.evaluated_low);
    Ok(())
}

fn human_labels(path: &Path) -> Result<Vec<vpf_core::pipeline::LabelRow>> {
    Ok(read_labels_csv(path)?.into_iter().filter(|l| l.model == HUMAN).collect())
}

fn cmd_judge(a: JudgeArgs) -> Result<()> {
    let ds = Dataset::load(&a.manifest)?;
    if a.mode == Mode::KeyObjectRationale && a.rationale_variant.is_none() {
        bail!("--mode rationale needs --rationale-variant");
    }
    let ids: Vec<String> = match &a.labels {
        Some(p) => human_labels(p)?.into_iter().map(|l| l.id).collect(),
        None => ds.manifest.iter().map(|r| r.id.clone()).collect(),
    };
    let mut warnings = Vec::new();
    let detections = ds.detections(a.endpoint.min_score, &mut warnings);
    let rationales: HashMap<_, _> = match &a.rationales {
        Some(p) => read_jsonl::<RationaleRow>(p)?.into_iter().map(|r| (r.id.clone(), r.rationale())).collect(),
        None => HashMap::new(),
    };
    let cache = ResponseCache::open(&a.endpoint.cache_dir)?;
    let client = a.endpoint.client();
    let judge = Judge::new(client.as_ref().map(|c| c as &dyn ChatBackend), &cache)
        .with_max_in_flight(a.endpoint.max_in_flight);
    let run = RunSpec::new(a.mode, a.rationale_variant);
    let rows = judge_run(&judge, &ds, &ids, &run, &detections, &rationales, &a.endpoint.settings(), &progress)?;
    write_jsonl(&a.out, &rows)?;
    let high = rows.iter().filter(|r| r.parsed == vpf_core::Parsed::High).count();
    let low = rows.iter().filter(|r| r.parsed == vpf_core::Parsed::Low).count();
    println!("{}: {} requests, {high} high, {low} low, {} unparseable", run.run_id, rows.len(), rows.len() - high - low);
    Ok(())
}

fn cmd_rationale(a: RationaleArgs) -> Result<()> {
    let ds = Dataset::load(&a.manifest)?;
    let labels = human_labels(&a.labels)?;
    let mut warnings = Vec::new();
    let detections = ds.detections(a.endpoint.min_score, &mut warnings);
    let cache = ResponseCache::open(&a.endpoint.cache_dir)?;
    let client = a.endpoint.client();
    let judge = Judge::new(client.as_ref().map(|c| c as &dyn ChatBackend), &cache)
        .with_max_in_flight(a.endpoint.max_in_flight);
    let rows =
        generate_rationales(&judge, &ds, &labels, &detections, a.variant, &a.endpoint.settings(), &progress)?;
    for r in &rows {
        r.warnings.iter().for_each(|w| log::warn!("{}: {w}", r.id));
    }
    write_jsonl(&a.out, &rows)?;
    println!("wrote {} {} rationales to {}", rows.len(), a.variant, a.out.display());
    Ok(())
}

fn load_preds(paths: &[PathBuf]) -> Result<indexmap::IndexMap<String, Vec<PredRow>>> {
    let mut runs = indexmap::IndexMap::new();
    for p in paths {
        let rows: Vec<PredRow> = read_jsonl(p)?;
        let id = rows.first().map(|r| r.run_id.clone()).unwrap_or_else(|| p.display().to_string());
        if runs.insert(id.clone(), rows).is_some() {
            bail!("run `{id}` given twice");
        }
    }
    Ok(runs)
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let features = read_features_csv(&a.features)?;
    let mut outcomes = label_blocks(&read_labels_csv(&a.labels)?);
    for (id, rows) in load_preds(&a.preds)? {
        outcomes.insert(id, parsed_predictions(&rows));
    }
    let ame = match a.ame {
        AmeArg::Derivative => AmeKind::Derivative,
        AmeArg::Discrete => AmeKind::Discrete,
    };
    let report = fit_outcomes(&features, &outcomes, a.family_by, ame)?;
    write_json(&a.out, &report)?;
    for b in &report.blocks {
        match &b.error {
            Some(e) => println!("{}: fit failed: {e}", b.outcome),
            None => {
                for e in b.effects.iter().filter(|e| e.estimate.ame.is_some()) {
                    let x = &e.estimate;
                    println!(
                        "{} {}: OR {:.4}{} ({:.4}, {:.4}) p_fdr {:.4}",
                        b.outcome, x.term, x.odds_ratio, x.stars, x.ci_low, x.ci_high, x.p_fdr
                    );
                }
            }
        }
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let features = read_features_csv(&a.features)?;
    let labels = human_labels(&a.labels)?;
    let runs = load_preds(&a.preds)?;
    let mut metrics = metrics_report(&runs, &labels, &a.baseline_run);
    let groups = group_summaries(&features, &labels, &runs, &mut metrics.warnings)?;
    let load = |p: &Option<PathBuf>| -> Result<Option<Vec<RationaleRow>>> {
        p.as_ref().map(|p| read_jsonl(p)).transpose().map_err(Into::into)
    };
    let (ag, inf) = (load(&a.rationales_agnostic)?, load(&a.rationales_informed)?);
    let sim = rationale_similarity(ag.as_deref(), inf.as_deref());
    write_json(&a.out_dir.join(METRICS_FILE), &metrics)?;
    write_groups_csv(&a.out_dir.join(GROUPS_FILE), &groups)?;
    write_json(&a.out_dir.join(SIM_FILE), &sim)?;
    metrics.warnings.iter().for_each(|w| log::warn!("{w}"));
    for r in &metrics.runs {
        if let Some(m) = &r.metrics {
            println!("{}: acc {:.2} prec {:.2} rec {:.2} f1 {:.2}", r.run_id, m.accuracy, m.precision, m.recall, m.f1);
        }
    }
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let (mut cfg, warnings) = load_config(&a.config)?;
    warnings.iter().for_each(|w| log::warn!("{w}"));
    let cwd = std::env::current_dir()?;
    let abs = |p: PathBuf| if p.is_relative() { cwd.join(p) } else { p };
    if a.endpoint.is_some() {
        cfg.endpoint = a.endpoint;
    }
    if let Some(p) = a.out_dir {
        cfg.out_dir = abs(p);
    }
    if let Some(p) = a.cache_dir {
        cfg.cache_dir = abs(p);
    }
    if let Some(m) = a.model_name {
        cfg.model_name = m;
    }
    if !a.modes.is_empty() {
        cfg.modes = a.modes;
    }
    if let Some(n) = a.max_in_flight {
        cfg.max_in_flight = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?.iter().for_each(|w| log::warn!("{w}"));
    let summary = run_pipeline(&cfg, RunOptions { force: a.force, dry_run: a.dry_run })?;
    println!("run {} -> {}", summary.run_id, summary.out_dir.display());
    for step in &summary.plan {
        println!("  {:<14} {:<10} {}", step.stage.as_str(), step.action, step.artifacts.join(", "));
    }
    if !a.dry_run {
        println!("network calls: {}, cache hits: {}, warnings: {}", summary.network_calls, summary.cache_hits, summary.warnings.len());
    }
    Ok(())
}

fn cmd_fixtures(a: FixtureArgs) -> Result<()> {
    let spec = FixtureSpec { seed: a.seed, n_images: a.n_images, ..FixtureSpec::default() };
    let out = generate_fixture(&spec, &a.out).with_context(|| format!("writing fixtures to {}", a.out.display()))?;
    println!("wrote {} records to {}", out.manifest.len(), out.root.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Features(a) => cmd_features(a),
        Command::Agreement(a) => cmd_agreement(a),
        Command::Judge(a) => cmd_judge(a),
        Command::RationaleGen(a) => cmd_rationale(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Report(a) => cmd_report(a),
        Command::Run(a) => cmd_run(a),
        Command::Fixtures(a) => cmd_fixtures(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
