use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::judge::{file_digest, Mode, RationaleVariant, DEFAULT_MAX_IN_FLIGHT, DEFAULT_PROMPT_VERSION};
use crate::lowlevel::DEFAULT_BINS_PER_AXIS;
use crate::midlevel::MidLevelConfig;

/// How BH-FDR families are formed across fitted outcomes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FdrFamily {
    /// One family per outcome block (human labels or one model run).
    #[default]
    Model,
    /// One family over every non-intercept term of every block.
    Global,
}

impl std::str::FromStr for FdrFamily {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "model" => Ok(FdrFamily::Model),
            "global" => Ok(FdrFamily::Global),
            _ => Err(PipelineError::Config(format!("unknown fdr family `{s}` (model|global)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmeKind {
    #[default]
    Derivative,
    Discrete,
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}
fn default_model() -> String {
    "gpt-5".into()
}
fn default_modes() -> Vec<Mode> {
    vec![Mode::Baseline]
}
fn default_variants() -> Vec<RationaleVariant> {
    vec![RationaleVariant::Agnostic]
}
fn default_p() -> f64 {
    0.85
}
fn default_alpha() -> f64 {
    0.20
}
fn default_beta() -> f64 {
    0.10
}
fn default_bins() -> usize {
    DEFAULT_BINS_PER_AXIS
}
fn default_prompt_version() -> String {
    DEFAULT_PROMPT_VERSION.into()
}
fn default_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}
fn default_baseline_run() -> String {
    Mode::Baseline.as_str().into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest_path: PathBuf,
    #[serde(default)]
    pub annotations_path: Option<PathBuf>,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_model")]
    pub model_name: String,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    #[serde(default = "default_variants")]
    pub rationale_variants: Vec<RationaleVariant>,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_bins")]
    pub bins_per_axis: usize,
    #[serde(default)]
    pub fdr_family: FdrFamily,
    #[serde(default)]
    pub ame: AmeKind,
    #[serde(default)]
    pub reasoning_effort: Option<String>,
    #[serde(default = "default_prompt_version")]
    pub prompt_version: String,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub min_score: Option<f64>,
    #[serde(default = "default_baseline_run")]
    pub baseline_run: String,
}

impl RunConfig {
    /// Config with defaults for everything but the two required paths.
    pub fn new(manifest_path: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            manifest_path: manifest_path.into(),
            annotations_path: None,
            cache_dir: default_cache_dir(),
            out_dir: out_dir.into(),
            endpoint: None,
            model_name: default_model(),
            modes: default_modes(),
            rationale_variants: default_variants(),
            p: default_p(),
            alpha: default_alpha(),
            beta: default_beta(),
            bins_per_axis: default_bins(),
            fdr_family: FdrFamily::default(),
            ame: AmeKind::default(),
            reasoning_effort: None,
            prompt_version: default_prompt_version(),
            max_in_flight: default_in_flight(),
            seed: 0,
            min_score: None,
            baseline_run: default_baseline_run(),
        }
    }

    pub fn mid_level(&self) -> MidLevelConfig {
        MidLevelConfig { p: self.p, alpha: self.alpha, beta: self.beta }
    }

    /// Resolves relative paths against `base` (normally the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest_path);
        fix(&mut self.cache_dir);
        fix(&mut self.out_dir);
        if let Some(a) = &mut self.annotations_path {
            fix(a);
        }
    }

    /// Range checks and mode de-duplication. Returns warnings.
    pub fn validate(&mut self) -> Result<Vec<String>, PipelineError> {
        let mut warnings = Vec::new();
        self.mid_level().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.bins_per_axis == 0 {
            return Err(PipelineError::Config("bins_per_axis must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(PipelineError::Config("max_in_flight must be positive".into()));
        }
        if let Some(s) = self.min_score {
            if !(0.0..=1.0).contains(&s) {
                return Err(PipelineError::Config(format!("min_score {s} outside [0, 1]")));
            }
        }
        if self.model_name.trim().is_empty() {
            return Err(PipelineError::Config("model_name is empty".into()));
        }
        dedup(&mut self.modes, "mode", &mut warnings);
        dedup(&mut self.rationale_variants, "rationale variant", &mut warnings);
        if self.modes.contains(&Mode::KeyObjectRationale) && self.rationale_variants.is_empty() {
            return Err(PipelineError::Config("rationale mode needs at least one rationale variant".into()));
        }
        Ok(warnings)
    }

    /// Checks that referenced input files exist.
    pub fn check_inputs(&self) -> Result<(), PipelineError> {
        let mut inputs = vec![("manifest_path", &self.manifest_path)];
        if let Some(a) = &self.annotations_path {
            inputs.push(("annotations_path", a));
        }
        for (name, p) in inputs {
            if !p.is_file() {
                return Err(PipelineError::Config(format!("{name}: {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Run ids in execution order: one per mode, with the rationale mode
    /// expanded per variant.
    pub fn run_ids(&self) -> Vec<(String, Mode, Option<RationaleVariant>)> {
        let mut out = Vec::new();
        for &m in &self.modes {
            if m == Mode::KeyObjectRationale {
                for &v in &self.rationale_variants {
                    out.push((format!("{m}_{v}"), m, Some(v)));
                }
            } else {
                out.push((m.to_string(), m, None));
            }
        }
        out
    }

    /// Content digest over every setting that can change an artifact, plus the
    /// bytes of the manifest and annotation files. The endpoint is excluded.
    pub fn digest(&self) -> Result<String, PipelineError> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("endpoint");
        let digest_of = |p: &Path| {
            file_digest(p).map_err(|e| PipelineError::Config(e.to_string()))
        };
        v["manifest_digest"] = digest_of(&self.manifest_path)?.into();
        if let Some(a) = &self.annotations_path {
            v["annotations_digest"] = digest_of(a)?.into();
        }
        Ok(crate::judge::sha_hex(v.to_string().as_bytes()))
    }
}

fn dedup<T: PartialEq + Copy + std::fmt::Display>(items: &mut Vec<T>, what: &str, warnings: &mut Vec<String>) {
    let mut out: Vec<T> = Vec::with_capacity(items.len());
    for &m in items.iter() {
        if out.contains(&m) {
            warnings.push(format!("duplicate {what} `{m}` ignored"));
        } else {
            out.push(m);
        }
    }
    *items = out;
}

/// Reads, fills defaults, resolves paths relative to the file and validates.
/// Input files are not required to exist yet.
pub fn load_config(path: &Path) -> Result<(RunConfig, Vec<String>), PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let mut cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    let warnings = cfg.validate()?;
    Ok((cfg, warnings))
}

/// [`load_config`] plus existence checks on every referenced input.
pub fn validate_config(path: &Path) -> Result<(RunConfig, Vec<String>), PipelineError> {
    let (cfg, warnings) = load_config(path)?;
    cfg.check_inputs()?;
    Ok((cfg, warnings))
}
