//! One-class detector fitted on discovered subtle samples.
//!
//! The detector is a hypersphere in z-scored feature space. Its center is the
//! mean of the standardized training features and its radius is a
//! nearest-rank quantile of the training distances. A feature vector inside
//! the closed ball is judged to come from the subtle-sample distribution and
//! is rejected.
//!
//! Features come from the record's `features` field when the detector was
//! fitted on external features, otherwise from [`derive_features`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::a3_score;
use crate::record::{Dataset, PredictionRecord};
use crate::rejection::RejectorSpec;

pub const DEFAULT_MIN_TRAIN: usize = 20;
pub const DEFAULT_QUANTILE: f64 = 0.95;
pub const STD_FLOOR: f64 = 1e-8;
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("need at least {required} subtle samples to fit a detector, got {found}")]
    InsufficientSubtleSamples { required: usize, found: usize },
    #[error("feature dimension {found} does not match the detector's {expected}")]
    FeatureSchemaMismatch { expected: usize, found: usize },
    #[error("sample {0:?} has no external features but the detector requires them")]
    MissingFeatures(String),
    #[error("feature vectors have inconsistent dimensions ({first} vs {other})")]
    RaggedFeatures { first: usize, other: usize },
    #[error("quantile must lie in (0, 1], got {0}")]
    InvalidQuantile(f64),
    #[error("non-finite feature value")]
    NonFiniteFeature,
    #[error("no labeled failing samples pass the rejector; the rate is undefined")]
    EmptyEvaluationSet,
    #[error("sample {0:?} is unlabeled")]
    Unlabeled(String),
    #[error("invalid detector model: {0}")]
    InvalidModel(String),
    #[error("detector model JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self, DetectorError> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(FeatureVector(values))
        } else {
            Err(DetectorError::NonFiniteFeature)
        }
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSchema {
    External,
    Derived,
}

/// Feature vector of length `2C + 7` built from predictions alone.
///
/// | slots | content |
/// |---|---|
/// | C | sample probabilities, sorted descending |
/// | C | mean variant probabilities |
/// | 3 | dominator, supporter and distractor shares |
/// | 4 | `sum_g1`, `sum_g2`, `sum_g3`, score |
pub fn derive_features(record: &PredictionRecord) -> FeatureVector {
    let c = record.num_classes();
    let mut out = Vec::with_capacity(2 * c + 7);

    let mut sorted = record.probs().as_slice().to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    out.extend_from_slice(&sorted);

    let variants = record.variants();
    let mut mean = vec![0.0; c];
    if !variants.is_empty() {
        for v in variants {
            for (acc, p) in mean.iter_mut().zip(v.probs.as_slice()) {
                *acc += p;
            }
        }
        let n = variants.len() as f64;
        mean.iter_mut().for_each(|x| *x /= n);
    }
    out.extend_from_slice(&mean);

    let b = a3_score(record);
    if variants.is_empty() {
        out.extend_from_slice(&[0.0, 0.0, 0.0]);
    } else {
        let n = variants.len() as f64;
        out.push(b.dominator_count() as f64 / n);
        out.push(b.supporter_count() as f64 / n);
        out.push(b.distractor_count() as f64 / n);
    }
    out.extend_from_slice(&[b.sum_g1, b.sum_g2, b.sum_g3, b.score]);
    FeatureVector(out)
}

/// 1-based nearest-rank position `ceil(q * n)` for `n >= 1`.
///
/// A relative slack of 1e-12 absorbs products such as `0.95 * 100` that land
/// a hair above an integer in binary floating point.
pub fn nearest_rank(q: f64, n: usize) -> usize {
    let target = q * n as f64;
    let k = (target - target.abs() * 1e-12).ceil() as usize;
    k.clamp(1, n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub quantile: f64,
    pub min_train: usize,
    pub schema: FeatureSchema,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            quantile: DEFAULT_QUANTILE,
            min_train: DEFAULT_MIN_TRAIN,
            schema: FeatureSchema::Derived,
        }
    }
}

/// Fitted hypersphere detector. Immutable after fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    dim: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
    center: Vec<f64>,
    radius: f64,
    quantile: f64,
    feature_schema: FeatureSchema,
    train_count: usize,
    version: u32,
}

pub fn fit_detector(
    features: &[FeatureVector],
    options: &FitOptions,
) -> Result<DetectorModel, DetectorError> {
    let q = options.quantile;
    if !(q > 0.0 && q <= 1.0) {
        return Err(DetectorError::InvalidQuantile(q));
    }
    let n = features.len();
    if n < options.min_train.max(1) {
        return Err(DetectorError::InsufficientSubtleSamples {
            required: options.min_train.max(1),
            found: n,
        });
    }
    let dim = features[0].dim();
    if let Some(f) = features.iter().find(|f| f.dim() != dim) {
        return Err(DetectorError::RaggedFeatures {
            first: dim,
            other: f.dim(),
        });
    }

    let nf = n as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, x) in mean.iter_mut().zip(f.values()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);

    let mut var = vec![0.0; dim];
    for f in features {
        for ((v, x), m) in var.iter_mut().zip(f.values()).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / nf).sqrt().max(STD_FLOOR)).collect();

    let standardized: Vec<Vec<f64>> = features
        .iter()
        .map(|f| standardize(f.values(), &mean, &std))
        .collect();
    let mut center = vec![0.0; dim];
    for z in &standardized {
        for (c, x) in center.iter_mut().zip(z) {
            *c += x;
        }
    }
    center.iter_mut().for_each(|c| *c /= nf);

    let mut distances: Vec<f64> = standardized
        .iter()
        .map(|z| euclidean(z, &center))
        .collect();
    distances.sort_by(f64::total_cmp);
    let radius = distances[nearest_rank(q, n) - 1];

    Ok(DetectorModel {
        dim,
        mean,
        std,
        center,
        radius,
        quantile: q,
        feature_schema: options.schema,
        train_count: n,
        version: MODEL_VERSION,
    })
}

fn standardize(x: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(mean)
        .zip(std)
        .map(|((x, m), s)| (x - m) / s)
        .collect()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

impl DetectorModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn quantile(&self) -> f64 {
        self.quantile
    }

    pub fn feature_schema(&self) -> FeatureSchema {
        self.feature_schema
    }

    pub fn train_count(&self) -> usize {
        self.train_count
    }

    /// Feature vector of `record` under this model's schema.
    pub fn features_for(&self, record: &PredictionRecord) -> Result<FeatureVector, DetectorError> {
        let f = match self.feature_schema {
            FeatureSchema::Derived => derive_features(record),
            FeatureSchema::External => FeatureVector::new(
                record
                    .features()
                    .ok_or_else(|| DetectorError::MissingFeatures(record.sample_id().into()))?
                    .to_vec(),
            )?,
        };
        if f.dim() != self.dim {
            return Err(DetectorError::FeatureSchemaMismatch {
                expected: self.dim,
                found: f.dim(),
            });
        }
        Ok(f)
    }

    /// Distance from the center in standardized space.
    pub fn distance(&self, feature: &FeatureVector) -> Result<f64, DetectorError> {
        if feature.dim() != self.dim {
            return Err(DetectorError::FeatureSchemaMismatch {
                expected: self.dim,
                found: feature.dim(),
            });
        }
        let z = standardize(feature.values(), &self.mean, &self.std);
        Ok(euclidean(&z, &self.center))
    }

    /// `true` (reject) when the feature lies in the closed ball.
    pub fn decide(&self, feature: &FeatureVector) -> Result<bool, DetectorError> {
        Ok(self.distance(feature)? <= self.radius)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, DetectorError> {
        let model: DetectorModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DetectorError> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DetectorError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::InvalidModel(m.to_string()));
        if self.version != MODEL_VERSION {
            return bad("unsupported version");
        }
        if self.mean.len() != self.dim || self.std.len() != self.dim || self.center.len() != self.dim
        {
            return bad("vector lengths differ from dim");
        }
        if self.std.iter().any(|s| !(*s >= STD_FLOOR)) {
            return bad("std below floor");
        }
        if !(self.radius >= 0.0) || !self.radius.is_finite() {
            return bad("radius must be finite and non-negative");
        }
        if !(self.quantile > 0.0 && self.quantile <= 1.0) {
            return bad("quantile outside (0, 1]");
        }
        if self.mean.iter().chain(&self.center).any(|x| !x.is_finite()) {
            return bad("non-finite mean or center");
        }
        Ok(())
    }
}

pub fn detector_decide(model: &DetectorModel, feature: &FeatureVector) -> Result<bool, DetectorError> {
    model.decide(feature)
}

fn rate_over(
    model: &DetectorModel,
    benchmark: &Dataset,
    spec: &RejectorSpec,
    want_failing: bool,
) -> Result<f64, DetectorError> {
    let mut total = 0usize;
    let mut rejected = 0usize;
    for r in benchmark {
        let failing = r
            .is_failing()
            .ok_or_else(|| DetectorError::Unlabeled(r.sample_id().into()))?;
        if failing != want_failing || !spec.passes(r.confidence()) {
            continue;
        }
        total += 1;
        if model.decide(&model.features_for(r)?)? {
            rejected += 1;
        }
    }
    if total == 0 {
        return Err(DetectorError::EmptyEvaluationSet);
    }
    Ok(rejected as f64 / total as f64)
}

/// Fraction of benchmark failing samples that pass the rejector and are then
/// rejected by the detector.
pub fn defense_success_rate(
    model: &DetectorModel,
    benchmark: &Dataset,
    spec: &RejectorSpec,
) -> Result<f64, DetectorError> {
    rate_over(model, benchmark, spec, true)
}

/// Fraction of correctly classified benchmark samples that pass the rejector
/// but are rejected by the detector.
pub fn false_rejection_rate(
    model: &DetectorModel,
    benchmark: &Dataset,
    spec: &RejectorSpec,
) -> Result<f64, DetectorError> {
    rate_over(model, benchmark, spec, false)
}
