//! Ranking of misclassified inputs by how well the model's prediction agrees
//! with its predictions on augmented copies, plus the reject-option pipeline
//! built on top of that ranking.
//!
//! The crate consumes JSONL prediction records (see [`record`]) and never
//! runs a model itself. [`synth`] provides a small self-contained world for
//! experiments and tests.

pub mod alignment;
pub mod baselines;
pub mod detector;
pub mod evaluation;
pub mod pipeline;
pub mod record;
pub mod rejection;
pub mod synth;

#[cfg(test)]
mod testutil;

pub use alignment::{a3_score, majority_class, AlignmentBreakdown, TermSet};
pub use baselines::{rank, Method, RankedEntry, RankedList, RankerSpec};
pub use detector::{fit_detector, DetectorModel, FeatureSchema, FeatureVector, FitOptions};
pub use evaluation::{Budget, EvalReport, WilcoxonResult};
pub use pipeline::{PipelineConfig, PipelineError};
pub use record::{Dataset, PredictionRecord, PredictionVector, RecordError};
pub use rejection::{Decision, RejectorSpec};
