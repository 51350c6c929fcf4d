//! Reject option: the confidence rejector and its composition with a
//! one-class detector.
//!
//! A record is rejected by the confidence rejector when its confidence is
//! strictly lower than `theta`. Records at exactly `theta` pass. The detector
//! only sees records that passed the confidence rejector.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{DetectorError, DetectorModel};
use crate::record::{Dataset, PredictionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("theta must lie in (0, 1), got {0}")]
pub struct InvalidTheta(pub f64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectorSpec {
    theta: f64,
}

impl RejectorSpec {
    pub fn new(theta: f64) -> Result<Self, InvalidTheta> {
        if theta > 0.0 && theta < 1.0 {
            Ok(RejectorSpec { theta })
        } else {
            Err(InvalidTheta(theta))
        }
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// `true` when a prediction with this confidence passes the rejector.
    pub fn passes(&self, confidence: f64) -> bool {
        confidence >= self.theta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", content = "class", rename_all = "snake_case")]
pub enum Decision {
    Predicted(usize),
    RejectedByR,
    RejectedByD,
}

impl Decision {
    pub fn is_rejected(&self) -> bool {
        !matches!(self, Decision::Predicted(_))
    }

    pub fn outcome_name(&self) -> &'static str {
        match self {
            Decision::Predicted(_) => "predicted",
            Decision::RejectedByR => "rejected_by_r",
            Decision::RejectedByD => "rejected_by_d",
        }
    }
}

pub fn confidence_reject(record: &PredictionRecord, spec: &RejectorSpec) -> bool {
    !spec.passes(record.confidence())
}

pub fn two_stage_decide(
    record: &PredictionRecord,
    spec: &RejectorSpec,
    detector: Option<&DetectorModel>,
) -> Result<Decision, DetectorError> {
    if confidence_reject(record, spec) {
        return Ok(Decision::RejectedByR);
    }
    if let Some(model) = detector {
        let features = model.features_for(record)?;
        if model.decide(&features)? {
            return Ok(Decision::RejectedByD);
        }
    }
    Ok(Decision::Predicted(record.predicted_class()))
}

/// Decisions for every record, in dataset order.
pub fn decide_all(
    dataset: &Dataset,
    spec: &RejectorSpec,
    detector: Option<&DetectorModel>,
) -> Result<Vec<Decision>, DetectorError> {
    dataset
        .records()
        .par_iter()
        .map(|r| two_stage_decide(r, spec, detector))
        .collect()
}

/// Whether the record is a misclassification that slips past the rejector.
/// `None` for unlabeled records.
pub fn subtle_flag(record: &PredictionRecord, spec: &RejectorSpec) -> Option<bool> {
    record
        .is_failing()
        .map(|failing| failing && !confidence_reject(record, spec))
}
