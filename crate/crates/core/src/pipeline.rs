//! End-to-end run: rank, take the labeling budget, keep the subtle samples,
//! fit the detector and report.
//!
//! All work runs inside a rayon pool of the configured size. Outputs do not
//! depend on that size: per-record work is an ordered parallel map and every
//! random draw comes from a seeded ChaCha8 stream.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::alignment::a3_score;
use crate::baselines::{rank, Method, RankError, RankedList, RankerSpec};
use crate::detector::{
    defense_success_rate, false_rejection_rate, fit_detector, DetectorError, DetectorModel,
    FeatureSchema, FeatureVector, FitOptions, DEFAULT_MIN_TRAIN, DEFAULT_QUANTILE,
};
use crate::evaluation::{
    evaluate_rankings, quadrant_counts, top_failing_confidences, write_confidence_csv, Budget,
    BudgetReport, EvalError, EvalReport, QuadrantCounts, REPORT_VERSION,
};
use crate::record::{
    load_dataset_path, serialize_record, write_dataset, Dataset, DatasetError, PredictionRecord,
    RecordError,
};
use crate::rejection::RejectorSpec;

/// ChaCha8 stream used for the hold-out split.
pub const SPLIT_STREAM: u64 = 2;

pub const RANKING_FILE: &str = "ranking.csv";
pub const BREAKDOWN_FILE: &str = "breakdown.csv";
pub const SUBTLE_FILE: &str = "subtle.jsonl";
pub const DETECTOR_FILE: &str = "detector.json";
pub const BUNDLE_FILE: &str = "bundle.json";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIDENCE_FILE: &str = "confidence_distribution.csv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("no label available for sample {0:?}")]
    MissingLabel(String),
    #[error("labels file: {0}")]
    Labels(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Where ground-truth labels for the selected samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelSource {
    /// The `label` field of each record.
    Embedded,
    /// A CSV file with header `sample_id,label`.
    File(PathBuf),
}

/// Where the detector is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum BenchmarkSource {
    None,
    File(PathBuf),
    /// Hold out this fraction of the input (seeded) and rank the rest.
    HoldOut(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemaChoice {
    /// External features when every subtle sample carries them.
    Auto,
    External,
    Derived,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub ranker: RankerSpec,
    pub budget: Budget,
    pub theta: f64,
    pub detector_quantile: f64,
    pub min_train: usize,
    pub feature_schema: SchemaChoice,
    pub labels: LabelSource,
    pub benchmark: BenchmarkSource,
    pub output_dir: PathBuf,
    pub parallelism: usize,
    pub seed: u64,
    pub top_failing_k: usize,
}

impl PipelineConfig {
    pub fn new(input: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            input: input.into(),
            ranker: RankerSpec::a3(),
            budget: Budget::Top(0.1),
            theta: 0.9,
            detector_quantile: DEFAULT_QUANTILE,
            min_train: DEFAULT_MIN_TRAIN,
            feature_schema: SchemaChoice::Auto,
            labels: LabelSource::Embedded,
            benchmark: BenchmarkSource::None,
            output_dir: output_dir.into(),
            parallelism: 1,
            seed: 0,
            top_failing_k: 50,
        }
    }

    pub fn rejector(&self) -> Result<RejectorSpec, PipelineError> {
        RejectorSpec::new(self.theta).map_err(|e| PipelineError::Config(e.to_string()))
    }

    fn validate(&self) -> Result<(), PipelineError> {
        self.rejector()?;
        if self.parallelism < 1 {
            return Err(PipelineError::Config("parallelism must be >= 1".into()));
        }
        if let BenchmarkSource::HoldOut(f) = self.benchmark {
            if !(f > 0.0 && f < 1.0) {
                return Err(PipelineError::Config(format!(
                    "hold-out fraction must lie in (0, 1), got {f}"
                )));
            }
        }
        Ok(())
    }
}

/// Runs `f` on a dedicated rayon pool with `parallelism` threads.
pub fn with_parallelism<T: Send>(
    parallelism: usize,
    f: impl FnOnce() -> T + Send,
) -> Result<T, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Ground truth lookup for the labeling step.
pub enum Labels {
    Embedded,
    Map(HashMap<String, usize>),
}

impl Labels {
    pub fn load(source: &LabelSource) -> Result<Self, PipelineError> {
        match source {
            LabelSource::Embedded => Ok(Labels::Embedded),
            LabelSource::File(path) => Self::read_csv(File::open(path)?),
        }
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, PipelineError> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| PipelineError::Labels(format!("missing column {name:?}")))
        };
        let (id_col, label_col) = (col("sample_id")?, col("label")?);
        let mut map = HashMap::new();
        for (i, row) in r.records().enumerate() {
            let row = row?;
            let label = row[label_col].trim().parse::<usize>().map_err(|_| {
                PipelineError::Labels(format!("line {}: bad label {:?}", i + 2, &row[label_col]))
            })?;
            map.insert(row[id_col].to_string(), label);
        }
        Ok(Labels::Map(map))
    }

    /// File labels win; the embedded label fills any gap.
    fn label_for(&self, record: &PredictionRecord) -> Option<usize> {
        match self {
            Labels::Embedded => record.label(),
            Labels::Map(m) => m.get(record.sample_id()).copied().or(record.label()),
        }
    }

    /// Attaches labels to every record that has one available.
    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset, PipelineError> {
        match self {
            Labels::Embedded => Ok(dataset.clone()),
            Labels::Map(_) => {
                let records = dataset
                    .iter()
                    .map(|r| match self.label_for(r) {
                        Some(l) => r.with_label(Some(l)),
                        None => Ok(r.clone()),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(Dataset::new(records)?)
            }
        }
    }
}

/// Splits off a seeded `fraction` of the records as a benchmark. Both parts
/// keep the input order. Returns `(rank_set, benchmark)`.
pub fn holdout_split(dataset: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let n = dataset.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    idx.shuffle(&mut rng);
    let held = ((n as f64) * fraction).round() as usize;
    let mut bench: Vec<usize> = idx[..held].to_vec();
    let mut rest: Vec<usize> = idx[held..].to_vec();
    bench.sort_unstable();
    rest.sort_unstable();
    (dataset.select(&rest), dataset.select(&bench))
}

/// Writes the per-record score breakdown CSV in dataset order.
pub fn write_breakdown_csv<W: Write>(dataset: &Dataset, out: W) -> Result<(), PipelineError> {
    let rows: Vec<_> = dataset.records().par_iter().map(a3_score).collect();
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "sample_id",
        "predicted_class",
        "confidence",
        "majority_class",
        "sum_g1",
        "sum_g2",
        "sum_g3",
        "score",
    ])?;
    for (r, b) in dataset.iter().zip(rows) {
        w.write_record([
            r.sample_id().to_string(),
            b.predicted_class.to_string(),
            b.confidence.to_string(),
            b.majority_class.to_string(),
            b.sum_g1.to_string(),
            b.sum_g2.to_string(),
            b.sum_g3.to_string(),
            b.score.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Loads the input, ranks it and writes the ranking (and, for the alignment
/// ranker, the score breakdown) to the output directory.
pub fn run_rank(config: &PipelineConfig) -> Result<RankedList, PipelineError> {
    config.validate()?;
    with_parallelism(config.parallelism, || {
        let dataset = load_dataset_path(&config.input)?;
        fs::create_dir_all(&config.output_dir)?;
        let ranked = rank(&dataset, &config.ranker);
        write_rank_outputs(config, &dataset, &ranked)?;
        Ok(ranked)
    })?
}

fn write_rank_outputs(
    config: &PipelineConfig,
    dataset: &Dataset,
    ranked: &RankedList,
) -> Result<(), PipelineError> {
    ranked.write_csv(BufWriter::new(File::create(config.output_dir.join(RANKING_FILE))?))?;
    if config.ranker.method() == Method::A3 {
        write_breakdown_csv(
            dataset,
            BufWriter::new(File::create(config.output_dir.join(BREAKDOWN_FILE))?),
        )?;
    }
    Ok(())
}

/// The subtle set: samples within the first `omega` of the ranking that pass
/// the rejector and turn out misclassified once labeled.
pub fn label_subtle(
    ranked: &RankedList,
    dataset: &Dataset,
    omega: usize,
    spec: &RejectorSpec,
    labels: &Labels,
) -> Result<Dataset, PipelineError> {
    if omega > dataset.len() {
        return Err(EvalError::BudgetExceedsDataset {
            omega,
            size: dataset.len(),
        }
        .into());
    }
    let mut out = Vec::new();
    for e in ranked.top(omega) {
        let r = dataset.get(&e.sample_id).ok_or_else(|| {
            EvalError::RankingMismatch(format!("unknown sample_id {:?}", e.sample_id))
        })?;
        if !spec.passes(r.confidence()) {
            continue;
        }
        let label = labels
            .label_for(r)
            .ok_or_else(|| PipelineError::MissingLabel(r.sample_id().to_string()))?;
        if label != r.predicted_class() {
            out.push(r.with_label(Some(label))?);
        }
    }
    Ok(Dataset::new(out)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum Warning {
    InsufficientSubtleSamples { required: usize, found: usize },
    UnlabeledRankSet { unlabeled: usize },
    EmptyDefenseSet,
    EmptyFalseRejectionSet,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub ranker: String,
    pub budget: BudgetReport,
    pub subtle_count: usize,
    pub dataset_digest: String,
    pub seed: u64,
}

/// The confidence rejector, optionally extended with a fitted detector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnhancedModelBundle {
    pub spec_version: u32,
    pub rejector: RejectorSpec,
    pub detector: Option<DetectorModel>,
    pub provenance: Provenance,
}

/// SHA-256 over the canonical serialization of every record.
pub fn dataset_digest(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    for r in dataset {
        h.update(serialize_record(r).as_bytes());
    }
    h.finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn choose_schema(choice: SchemaChoice, t_sub: &Dataset) -> FeatureSchema {
    match choice {
        SchemaChoice::External => FeatureSchema::External,
        SchemaChoice::Derived => FeatureSchema::Derived,
        SchemaChoice::Auto => {
            if !t_sub.is_empty() && t_sub.iter().all(|r| r.features().is_some()) {
                FeatureSchema::External
            } else {
                FeatureSchema::Derived
            }
        }
    }
}

/// Fits the detector on the subtle set when it is large enough. Too few
/// samples is not an error: the bundle comes back without a detector and a
/// warning says why.
pub fn build_enhanced(
    t_sub: &Dataset,
    rejector: RejectorSpec,
    options: &FitOptions,
    schema: SchemaChoice,
    provenance: Provenance,
) -> Result<(EnhancedModelBundle, Vec<Warning>), PipelineError> {
    let mut warnings = Vec::new();
    let options = FitOptions {
        schema: choose_schema(schema, t_sub),
        ..*options
    };
    let detector = if t_sub.len() < options.min_train.max(1) {
        warnings.push(Warning::InsufficientSubtleSamples {
            required: options.min_train.max(1),
            found: t_sub.len(),
        });
        None
    } else {
        let features: Vec<FeatureVector> = match options.schema {
            FeatureSchema::Derived => t_sub
                .records()
                .par_iter()
                .map(crate::detector::derive_features)
                .collect(),
            FeatureSchema::External => t_sub
                .iter()
                .map(|r| {
                    r.features()
                        .ok_or_else(|| DetectorError::MissingFeatures(r.sample_id().into()))
                        .and_then(|f| FeatureVector::new(f.to_vec()))
                })
                .collect::<Result<_, _>>()?,
        };
        Some(fit_detector(&features, &options)?)
    };
    Ok((
        EnhancedModelBundle {
            spec_version: REPORT_VERSION,
            rejector,
            detector,
            provenance,
        },
        warnings,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectorSummary {
    pub train_count: usize,
    pub dim: usize,
    pub radius: f64,
    pub quantile: f64,
    pub feature_schema: FeatureSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefenseReport {
    pub benchmark_size: usize,
    /// Rejected share of failing benchmark samples that pass the rejector.
    pub defense_success_rate: Option<f64>,
    /// Rejected share of correct benchmark samples that pass the rejector.
    pub false_rejection_rate: Option<f64>,
    pub quadrants: QuadrantCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub spec_version: u32,
    pub seed: u64,
    pub ranker: String,
    pub ranking_order: &'static str,
    pub theta: f64,
    pub rank_set_size: usize,
    pub budget: BudgetReport,
    pub subtle_count: usize,
    pub evaluation: Option<EvalReport>,
    pub detector: Option<DetectorSummary>,
    pub defense: Option<DefenseReport>,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub ranked: RankedList,
    pub t_sub: Dataset,
    pub bundle: EnhancedModelBundle,
    pub report: RunReport,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Runs the whole pipeline in memory without touching the filesystem.
pub fn execute(
    config: &PipelineConfig,
    input: &Dataset,
    benchmark: Option<&Dataset>,
    labels: &Labels,
) -> Result<RunOutput, PipelineError> {
    let rejector = config.rejector()?;
    let rank_set = labels.apply(input)?;
    let ranked = rank(&rank_set, &config.ranker);

    let mut warnings = Vec::new();
    let omega = config.budget.resolve(&rank_set)?;
    let t_sub = label_subtle(&ranked, &rank_set, omega, &rejector, labels)?;

    let provenance = Provenance {
        ranker: config.ranker.label(),
        budget: BudgetReport::new(&config.budget, omega),
        subtle_count: t_sub.len(),
        dataset_digest: dataset_digest(input),
        seed: config.seed,
    };
    let fit = FitOptions {
        quantile: config.detector_quantile,
        min_train: config.min_train,
        schema: FeatureSchema::Derived,
    };
    let (bundle, fit_warnings) =
        build_enhanced(&t_sub, rejector, &fit, config.feature_schema, provenance)?;
    warnings.extend(fit_warnings);

    let evaluation = if rank_set.is_fully_labeled() {
        Some(evaluate_rankings(
            &rank_set,
            &[(config.ranker.label(), ranked.clone())],
            &config.budget,
            &[rejector],
            config.top_failing_k,
        )?)
    } else {
        warnings.push(Warning::UnlabeledRankSet {
            unlabeled: rank_set.iter().filter(|r| r.label().is_none()).count(),
        });
        None
    };

    let defense = match benchmark {
        None => None,
        Some(bench) => {
            let bench = labels.apply(bench)?;
            let detector = bundle.detector.as_ref();
            let (dsr, frr) = match detector {
                None => (None, None),
                Some(model) => {
                    let dsr = match defense_success_rate(model, &bench, &rejector) {
                        Ok(v) => Some(v),
                        Err(DetectorError::EmptyEvaluationSet) => {
                            warnings.push(Warning::EmptyDefenseSet);
                            None
                        }
                        Err(e) => return Err(e.into()),
                    };
                    let frr = match false_rejection_rate(model, &bench, &rejector) {
                        Ok(v) => Some(v),
                        Err(DetectorError::EmptyEvaluationSet) => {
                            warnings.push(Warning::EmptyFalseRejectionSet);
                            None
                        }
                        Err(e) => return Err(e.into()),
                    };
                    (dsr, frr)
                }
            };
            Some(DefenseReport {
                benchmark_size: bench.len(),
                defense_success_rate: dsr,
                false_rejection_rate: frr,
                quadrants: quadrant_counts(&bench, &rejector, detector)?,
            })
        }
    };

    let report = RunReport {
        spec_version: REPORT_VERSION,
        seed: config.seed,
        ranker: config.ranker.label(),
        ranking_order: if config.ranker.method().descending() {
            "descending"
        } else {
            "ascending"
        },
        theta: config.theta,
        rank_set_size: rank_set.len(),
        budget: BudgetReport::new(&config.budget, omega),
        subtle_count: t_sub.len(),
        evaluation,
        detector: bundle.detector.as_ref().map(|m| DetectorSummary {
            train_count: m.train_count(),
            dim: m.dim(),
            radius: m.radius(),
            quantile: m.quantile(),
            feature_schema: m.feature_schema(),
        }),
        defense,
        warnings,
    };
    Ok(RunOutput {
        ranked,
        t_sub,
        bundle,
        report,
    })
}

/// Full run from files: load, optionally split off a benchmark, execute, and
/// write every artifact into the output directory.
pub fn run_full(config: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    config.validate()?;
    with_parallelism(config.parallelism, || {
        let input = load_dataset_path(&config.input)?;
        let labels = Labels::load(&config.labels)?;
        let (rank_set, benchmark) = match &config.benchmark {
            BenchmarkSource::None => (input, None),
            BenchmarkSource::File(p) => (input, Some(load_dataset_path(p)?)),
            BenchmarkSource::HoldOut(f) => {
                let (r, b) = holdout_split(&input, *f, config.seed);
                (r, Some(b))
            }
        };
        let out = execute(config, &rank_set, benchmark.as_ref(), &labels)?;

        fs::create_dir_all(&config.output_dir)?;
        write_rank_outputs(config, &labels.apply(&rank_set)?, &out.ranked)?;
        write_dataset(
            &out.t_sub,
            BufWriter::new(File::create(config.output_dir.join(SUBTLE_FILE))?),
        )?;
        if let Some(model) = &out.bundle.detector {
            model.save(config.output_dir.join(DETECTOR_FILE))?;
        }
        write_json(&config.output_dir.join(BUNDLE_FILE), &out.bundle)?;
        write_json(&config.output_dir.join(REPORT_FILE), &out.report)?;
        let labeled = labels.apply(&rank_set)?;
        if labeled.is_fully_labeled() {
            let rows = top_failing_confidences(&out.ranked, &labeled, config.top_failing_k)?;
            write_confidence_csv(
                &[(config.ranker.label(), rows)],
                BufWriter::new(File::create(config.output_dir.join(CONFIDENCE_FILE))?),
            )?;
        }
        Ok(out)
    })?
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::worked_example;

    fn rec(id: &str, conf: f64, label: Option<usize>) -> PredictionRecord {
        PredictionRecord::new(id, vec![conf, 1.0 - conf], vec![], label, None).unwrap()
    }

    fn ranked_ids(ids: &[&str]) -> RankedList {
        RankedList::from_entries(
            ids.iter()
                .map(|id| crate::baselines::RankedEntry {
                    sample_id: id.to_string(),
                    key: 0.0,
                })
                .collect(),
        )
    }

    fn provenance() -> Provenance {
        Provenance {
            ranker: "a3".into(),
            budget: BudgetReport::new(&Budget::Cut, 1),
            subtle_count: 0,
            dataset_digest: String::new(),
            seed: 0,
        }
    }

    #[test]
    fn subtle_set_filters() {
        let d = Dataset::new(vec![
            rec("rejected", 0.6, Some(1)),
            rec("correct", 0.95, Some(0)),
            rec("subtle", 0.95, Some(1)),
            rec("outside", 0.97, Some(1)),
        ])
        .unwrap();
        let r = ranked_ids(&["rejected", "correct", "subtle", "outside"]);
        let t = RejectorSpec::new(0.9).unwrap();
        let sub = label_subtle(&r, &d, 3, &t, &Labels::Embedded).unwrap();
        assert_eq!(sub.iter().map(|r| r.sample_id()).collect::<Vec<_>>(), ["subtle"]);
        let all_rejected = label_subtle(&r, &d, 1, &t, &Labels::Embedded).unwrap();
        assert!(all_rejected.is_empty());
        let all_correct = label_subtle(&ranked_ids(&["correct", "rejected", "subtle", "outside"]), &d, 1, &t, &Labels::Embedded).unwrap();
        assert!(all_correct.is_empty());
    }

    #[test]
    fn missing_label_only_for_passing_samples() {
        let d = Dataset::new(vec![rec("low", 0.6, None), rec("high", 0.95, None)]).unwrap();
        let t = RejectorSpec::new(0.9).unwrap();
        let r = ranked_ids(&["low", "high"]);
        assert!(label_subtle(&r, &d, 1, &t, &Labels::Embedded).unwrap().is_empty());
        match label_subtle(&r, &d, 2, &t, &Labels::Embedded) {
            Err(PipelineError::MissingLabel(id)) => assert_eq!(id, "high"),
            other => panic!("unexpected {other:?}"),
        }
        let labels = Labels::read_csv("sample_id,label\nhigh,1\n".as_bytes()).unwrap();
        let sub = label_subtle(&r, &d, 2, &t, &labels).unwrap();
        assert_eq!(sub.len(), 1);
        assert_eq!(sub.records()[0].label(), Some(1));
    }

    #[test]
    fn labels_csv_errors() {
        assert!(Labels::read_csv("id,label\nx,1\n".as_bytes()).is_err());
        assert!(Labels::read_csv("sample_id,label\nx,-1\n".as_bytes()).is_err());
    }

    #[test]
    fn too_few_subtle_samples_yield_bare_bundle() {
        let recs: Vec<_> = (0..19).map(|i| rec(&format!("s{i}"), 0.9 + 0.001 * i as f64, Some(1))).collect();
        let t_sub = Dataset::new(recs).unwrap();
        let t = RejectorSpec::new(0.9).unwrap();
        let (bundle, warnings) =
            build_enhanced(&t_sub, t, &FitOptions::default(), SchemaChoice::Auto, provenance()).unwrap();
        assert!(bundle.detector.is_none());
        assert_eq!(
            warnings,
            [Warning::InsufficientSubtleSamples { required: 20, found: 19 }]
        );
        let (bundle, warnings) =
            build_enhanced(&Dataset::default(), t, &FitOptions::default(), SchemaChoice::Auto, provenance()).unwrap();
        assert!(bundle.detector.is_none());
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn external_features_selected_when_present() {
        let recs: Vec<_> = (0..25)
            .map(|i| {
                PredictionRecord::new(
                    format!("s{i}"),
                    vec![0.95, 0.05],
                    vec![],
                    Some(1),
                    Some(vec![i as f64, (i * i) as f64 % 7.0]),
                )
                .unwrap()
            })
            .collect();
        let t_sub = Dataset::new(recs).unwrap();
        let t = RejectorSpec::new(0.9).unwrap();
        let (bundle, warnings) =
            build_enhanced(&t_sub, t, &FitOptions::default(), SchemaChoice::Auto, provenance()).unwrap();
        assert!(warnings.is_empty());
        let m = bundle.detector.unwrap();
        assert_eq!(m.feature_schema(), FeatureSchema::External);
        assert_eq!(m.dim(), 2);
    }

    #[test]
    fn holdout_split_is_seeded_and_ordered() {
        let recs: Vec<_> = (0..40).map(|i| rec(&format!("s{i:02}"), 0.8, Some(0))).collect();
        let d = Dataset::new(recs).unwrap();
        let (a, b) = holdout_split(&d, 0.5, 7);
        let (a2, b2) = holdout_split(&d, 0.5, 7);
        assert_eq!((a.len(), b.len()), (20, 20));
        assert_eq!(a, a2);
        assert_eq!(b, b2);
        let pos: Vec<_> = a.iter().map(|r| d.position(r.sample_id()).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(b.iter().all(|r| a.get(r.sample_id()).is_none()));
    }

    #[test]
    fn single_worked_example_record_run() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.jsonl");
        fs::write(&input, crate::testutil::WORKED_EXAMPLE_LINE).unwrap();
        let mut cfg = PipelineConfig::new(&input, dir.path().join("out"));
        cfg.budget = Budget::Top(1.0);
        let ranked = run_rank(&cfg).unwrap();
        assert_eq!(ranked.len(), 1);
        assert!((ranked.entries()[0].key + 1.19).abs() < 1e-9);
        let breakdown = fs::read_to_string(dir.path().join("out").join(BREAKDOWN_FILE)).unwrap();
        assert!(breakdown.starts_with(
            "sample_id,predicted_class,confidence,majority_class,sum_g1,sum_g2,sum_g3,score\nworked_example,2,0.95,3,"
        ));
        let _ = worked_example();
    }

    #[test]
    fn empty_dataset_ranks_to_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.jsonl");
        fs::write(&input, "").unwrap();
        let cfg = PipelineConfig::new(&input, dir.path().join("out"));
        assert!(run_rank(&cfg).unwrap().is_empty());
        let csv = fs::read_to_string(dir.path().join("out").join(RANKING_FILE)).unwrap();
        assert_eq!(csv, "rank,sample_id,key\n");
    }
}
