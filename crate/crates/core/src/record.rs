//! Prediction records and their JSONL wire format.
//!
//! A record carries the classifier's prediction for one sample next to the
//! predictions for its augmented variants. Ground truth and an external
//! feature vector may ride along. Records are validated on construction;
//! nothing downstream re-checks the invariants.
//!
//! Probabilities are stored exactly as read. They are never renormalized.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Allowed deviation of a prediction vector's sum from 1.
pub const SUM_TOLERANCE: f64 = 1e-4;

fn fmt_id(id: &Option<String>) -> String {
    match id {
        Some(id) => format!(" (sample_id {id:?})"),
        None => String::new(),
    }
}

/// Errors raised while parsing or validating a single record.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecordError {
    #[error("malformed JSON{}: {message}", fmt_id(.sample_id))]
    MalformedJson {
        sample_id: Option<String>,
        message: String,
    },
    #[error("schema violation{}: {message}", fmt_id(.sample_id))]
    SchemaViolation {
        sample_id: Option<String>,
        message: String,
    },
    #[error("invariant violation{}: {message}", fmt_id(.sample_id))]
    InvariantViolation {
        sample_id: Option<String>,
        message: String,
    },
}

impl RecordError {
    pub fn sample_id(&self) -> Option<&str> {
        match self {
            RecordError::MalformedJson { sample_id, .. }
            | RecordError::SchemaViolation { sample_id, .. }
            | RecordError::InvariantViolation { sample_id, .. } => sample_id.as_deref(),
        }
    }

    fn invariant(sample_id: &str, message: impl Into<String>) -> Self {
        RecordError::InvariantViolation {
            sample_id: Some(sample_id.to_string()),
            message: message.into(),
        }
    }
}

/// Errors raised while loading a whole dataset.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: RecordError,
    },
    #[error("line {line}: duplicate sample_id {sample_id:?}")]
    DuplicateSampleId { line: usize, sample_id: String },
    #[error("line {line}: sample {sample_id:?} has {found} classes, dataset has {expected}")]
    InconsistentClassCount {
        line: usize,
        sample_id: String,
        expected: usize,
        found: usize,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Why a list of numbers is not a probability vector.
#[derive(Debug, Clone, PartialEq)]
pub enum VectorProblem {
    TooFewClasses(usize),
    NonFinite(usize),
    OutOfRange(usize, f64),
    BadSum(f64),
}

impl fmt::Display for VectorProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VectorProblem::TooFewClasses(n) => write!(f, "need at least 2 classes, got {n}"),
            VectorProblem::NonFinite(i) => write!(f, "component {i} is NaN or infinite"),
            VectorProblem::OutOfRange(i, v) => write!(f, "component {i} = {v} outside [0, 1]"),
            VectorProblem::BadSum(s) => {
                write!(f, "components sum to {s}, expected 1 within {SUM_TOLERANCE}")
            }
        }
    }
}

/// A classifier's per-class probability output.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct PredictionVector(Vec<f64>);

impl PredictionVector {
    pub fn new(probs: Vec<f64>) -> Result<Self, VectorProblem> {
        if probs.len() < 2 {
            return Err(VectorProblem::TooFewClasses(probs.len()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() {
                return Err(VectorProblem::NonFinite(i));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(VectorProblem::OutOfRange(i, p));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(VectorProblem::BadSum(sum));
        }
        Ok(PredictionVector(probs))
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    /// Index of the largest component; the smallest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Largest component (the prediction confidence).
    pub fn max(&self) -> f64 {
        self.0[self.argmax()]
    }
}

impl AsRef<[f64]> for PredictionVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Prediction for one augmented variant of a sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantPrediction {
    pub op_id: String,
    pub probs: PredictionVector,
}

impl VariantPrediction {
    pub fn new(op_id: impl Into<String>, probs: Vec<f64>) -> Result<Self, VectorProblem> {
        Ok(VariantPrediction {
            op_id: op_id.into(),
            probs: PredictionVector::new(probs)?,
        })
    }
}

/// One test sample with its own prediction and its variants' predictions.
/// Label and features are optional.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRecord {
    sample_id: String,
    probs: PredictionVector,
    variants: Vec<VariantPrediction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
}

#[derive(Deserialize)]
struct WireVariant {
    op_id: String,
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct WireRecord {
    sample_id: String,
    probs: Vec<f64>,
    #[serde(default)]
    variants: Vec<WireVariant>,
    #[serde(default)]
    label: Option<usize>,
    #[serde(default)]
    features: Option<Vec<f64>>,
}

impl PredictionRecord {
    /// Builds a record from raw parts, checking every record invariant.
    pub fn new(
        sample_id: impl Into<String>,
        probs: Vec<f64>,
        variants: Vec<(String, Vec<f64>)>,
        label: Option<usize>,
        features: Option<Vec<f64>>,
    ) -> Result<Self, RecordError> {
        let sample_id = sample_id.into();
        if sample_id.is_empty() {
            return Err(RecordError::SchemaViolation {
                sample_id: None,
                message: "sample_id must be non-empty".into(),
            });
        }
        let probs = PredictionVector::new(probs)
            .map_err(|e| RecordError::invariant(&sample_id, format!("probs: {e}")))?;
        let c = probs.num_classes();

        let mut checked = Vec::with_capacity(variants.len());
        for (i, (op_id, vprobs)) in variants.into_iter().enumerate() {
            if op_id.is_empty() {
                return Err(RecordError::invariant(
                    &sample_id,
                    format!("variant {i}: op_id must be non-empty"),
                ));
            }
            if vprobs.len() != c {
                return Err(RecordError::invariant(
                    &sample_id,
                    format!("variant {i} ({op_id}): {} classes, sample has {c}", vprobs.len()),
                ));
            }
            let vprobs = PredictionVector::new(vprobs).map_err(|e| {
                RecordError::invariant(&sample_id, format!("variant {i} ({op_id}): {e}"))
            })?;
            checked.push(VariantPrediction {
                op_id,
                probs: vprobs,
            });
        }

        if let Some(label) = label {
            if label >= c {
                return Err(RecordError::invariant(
                    &sample_id,
                    format!("label {label} out of range for {c} classes"),
                ));
            }
        }
        if let Some(features) = &features {
            if let Some(i) = features.iter().position(|x| !x.is_finite()) {
                return Err(RecordError::invariant(
                    &sample_id,
                    format!("feature {i} is NaN or infinite"),
                ));
            }
        }

        Ok(PredictionRecord {
            sample_id,
            probs,
            variants: checked,
            label,
            features,
        })
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn probs(&self) -> &PredictionVector {
        &self.probs
    }

    pub fn variants(&self) -> &[VariantPrediction] {
        &self.variants
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn features(&self) -> Option<&[f64]> {
        self.features.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.num_classes()
    }

    pub fn predicted_class(&self) -> usize {
        self.probs.argmax()
    }

    pub fn confidence(&self) -> f64 {
        self.probs.max()
    }

    /// `Some(true)` when labeled and misclassified, `None` when unlabeled.
    pub fn is_failing(&self) -> Option<bool> {
        self.label.map(|l| l != self.predicted_class())
    }

    /// Returns a copy with the ground-truth label replaced.
    pub fn with_label(&self, label: Option<usize>) -> Result<Self, RecordError> {
        if let Some(l) = label {
            if l >= self.num_classes() {
                return Err(RecordError::invariant(
                    &self.sample_id,
                    format!("label {l} out of range for {} classes", self.num_classes()),
                ));
            }
        }
        let mut out = self.clone();
        out.label = label;
        Ok(out)
    }

    /// Reorders the variants; used by property tests and tools that shuffle.
    pub fn with_variants_permuted(&self, order: &[usize]) -> Self {
        let mut out = self.clone();
        out.variants = order.iter().map(|&i| self.variants[i].clone()).collect();
        out
    }
}

/// Parses one JSONL line into a validated record.
pub fn parse_record(line: &str) -> Result<PredictionRecord, RecordError> {
    let value: Value = serde_json::from_str(line).map_err(|e| RecordError::MalformedJson {
        sample_id: None,
        message: e.to_string(),
    })?;
    let sample_id = value
        .get("sample_id")
        .and_then(Value::as_str)
        .map(str::to_string);
    if !value.is_object() {
        return Err(RecordError::SchemaViolation {
            sample_id,
            message: "record must be a JSON object".into(),
        });
    }
    let wire: WireRecord =
        serde_json::from_value(value).map_err(|e| RecordError::SchemaViolation {
            sample_id: sample_id.clone(),
            message: e.to_string(),
        })?;
    PredictionRecord::new(
        wire.sample_id,
        wire.probs,
        wire.variants
            .into_iter()
            .map(|v| (v.op_id, v.probs))
            .collect(),
        wire.label,
        wire.features,
    )
}

/// Serializes a record as one JSON line terminated by `\n`.
pub fn serialize_record(record: &PredictionRecord) -> String {
    let mut line = serde_json::to_string(record).expect("record serialization is infallible");
    line.push('\n');
    line
}

/// An ordered, immutable collection of records sharing one class count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    records: Vec<PredictionRecord>,
    num_classes: Option<usize>,
    index: HashMap<String, usize>,
}

impl Dataset {
    /// Builds a dataset, rejecting duplicate ids and mixed class counts.
    /// Line numbers in errors are 1-based positions in `records`.
    pub fn new(records: Vec<PredictionRecord>) -> Result<Self, DatasetError> {
        let mut index = HashMap::with_capacity(records.len());
        let mut num_classes = None;
        for (i, r) in records.iter().enumerate() {
            match num_classes {
                None => num_classes = Some(r.num_classes()),
                Some(c) if c != r.num_classes() => {
                    return Err(DatasetError::InconsistentClassCount {
                        line: i + 1,
                        sample_id: r.sample_id.clone(),
                        expected: c,
                        found: r.num_classes(),
                    })
                }
                Some(_) => {}
            }
            if index.insert(r.sample_id.clone(), i).is_some() {
                return Err(DatasetError::DuplicateSampleId {
                    line: i + 1,
                    sample_id: r.sample_id.clone(),
                });
            }
        }
        Ok(Dataset {
            records,
            num_classes,
            index,
        })
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PredictionRecord> {
        self.records.iter()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Class count shared by all records; `None` for an empty dataset.
    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    pub fn get(&self, sample_id: &str) -> Option<&PredictionRecord> {
        self.index.get(sample_id).map(|&i| &self.records[i])
    }

    pub fn position(&self, sample_id: &str) -> Option<usize> {
        self.index.get(sample_id).copied()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.records.iter().all(|r| r.label.is_some())
    }

    pub fn failing_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.is_failing() == Some(true))
            .count()
    }

    /// Records at the given positions, in the given order.
    pub fn select(&self, positions: &[usize]) -> Dataset {
        let records: Vec<_> = positions.iter().map(|&i| self.records[i].clone()).collect();
        Dataset::new(records).expect("subset of a valid dataset is valid")
    }

    pub fn into_records(self) -> Vec<PredictionRecord> {
        self.records
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a PredictionRecord;
    type IntoIter = std::slice::Iter<'a, PredictionRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

/// Reads newline-delimited records. Blank lines are skipped; reported line
/// numbers are 1-based physical lines.
pub fn load_dataset<R: BufRead>(reader: R) -> Result<Dataset, DatasetError> {
    let mut records = Vec::new();
    let mut lines_of = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            continue;
        }
        let record = parse_record(trimmed).map_err(|source| DatasetError::Parse {
            line: i + 1,
            source,
        })?;
        records.push(record);
        lines_of.push(i + 1);
    }
    // Re-map positional line numbers back to physical lines.
    Dataset::new(records).map_err(|e| match e {
        DatasetError::DuplicateSampleId { line, sample_id } => DatasetError::DuplicateSampleId {
            line: lines_of[line - 1],
            sample_id,
        },
        DatasetError::InconsistentClassCount {
            line,
            sample_id,
            expected,
            found,
        } => DatasetError::InconsistentClassCount {
            line: lines_of[line - 1],
            sample_id,
            expected,
            found,
        },
        other => other,
    })
}

pub fn load_dataset_path(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let file = File::open(path)?;
    load_dataset(BufReader::new(file))
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> std::io::Result<()> {
    for r in dataset {
        out.write_all(serialize_record(r).as_bytes())?;
    }
    out.flush()
}
