//! Visual persuasive factor extraction and evaluation toolkit.
//!
//! Low-level colour statistics, mid-level saliency composition metrics and
//! high-level detection indicators; multi-rater agreement filtering; logistic
//! inference with robust errors; a cached VLM judging harness; and the
//! reporting that ties predictions back to features.

pub mod agreement;
pub mod datamodel;
pub mod fixtures;
pub mod highlevel;
pub mod judge;
pub mod lowlevel;
pub mod midlevel;
pub mod pipeline;
pub mod report;
pub mod stats;

use thiserror::Error;

pub use agreement::{AgreementError, AgreementSummary, Band, RobustSubset};
pub use datamodel::{Annotation, AnnotationTable, BinaryLabel, DataError, ImageRecord, Manifest};
pub use fixtures::{FixtureError, FixtureSpec};
pub use highlevel::{DetectionError, HighLevelIndicators, NounMatch};
pub use judge::{JudgeError, Mode, Parsed, PromptConfig, RationaleVariant};
pub use lowlevel::{ImageError, LowLevelFeatures, RgbImage};
pub use midlevel::{MidLevelConfig, MidLevelFeatures, SaliencyError, SaliencyMap};
pub use pipeline::{PipelineError, RunConfig};
pub use report::{ConfusionCounts, MetricRow, ReportError};
pub use stats::{EffectEstimate, LogitFit, StatsError};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Agreement(#[from] AgreementError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}
