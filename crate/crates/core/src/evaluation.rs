//! Experiment metrics: dataset statistics, budgeted discovery counts,
//! throughput and improvement ratios, the paired Wilcoxon signed-rank test
//! and two-stage rejection bookkeeping.
//!
//! "Passes the rejector" always means `confidence >= theta`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Serialize;
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::baselines::RankedList;
use crate::detector::{DetectorError, DetectorModel};
use crate::record::Dataset;
use crate::rejection::{two_stage_decide, Decision, RejectorSpec};

/// Version of the JSON report layout, written as `spec_version`.
pub const REPORT_VERSION: u32 = 1;

pub const THROUGHPUT_DEFINITION: &str =
    "discovered subtle samples in the top-omega / failing samples in the whole dataset";
pub const PASSES_REJECTOR_DEFINITION: &str = "confidence >= theta";
pub const IMPROVEMENT_DEFINITION: &str =
    "discovered failing in the top-omega / (omega * dataset failing ratio)";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{count} record(s) are unlabeled (first: {first:?})")]
    UnlabeledRecords { count: usize, first: String },
    #[error("budget {omega} exceeds the dataset size {size}")]
    BudgetExceedsDataset { omega: usize, size: usize },
    #[error("budget resolves to zero samples")]
    EmptyBudget,
    #[error("TOP fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("bad budget {0:?}; expected `top:<fraction>` or `cut`")]
    BadBudget(String),
    #[error("the dataset contains no failing samples")]
    NoFailingSamples,
    #[error("ranking does not match the dataset: {0}")]
    RankingMismatch(String),
    #[error("paired samples have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 6 non-zero differences, got {0}")]
    TooFewPairs(usize),
    #[error("non-finite value in paired samples")]
    NonFinite,
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

fn require_labels(dataset: &Dataset) -> Result<(), EvalError> {
    let mut unlabeled = dataset.iter().filter(|r| r.label().is_none());
    if let Some(first) = unlabeled.next() {
        return Err(EvalError::UnlabeledRecords {
            count: 1 + unlabeled.count(),
            first: first.sample_id().to_string(),
        });
    }
    Ok(())
}

/// Labeling budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    /// A fraction of the dataset size.
    Top(f64),
    /// The number of failing samples in the dataset.
    Cut,
}

impl Budget {
    pub fn top(fraction: f64) -> Result<Self, EvalError> {
        if fraction > 0.0 && fraction <= 1.0 {
            Ok(Budget::Top(fraction))
        } else {
            Err(EvalError::InvalidFraction(fraction))
        }
    }

    /// Number of samples to label: `ceil(fraction * n)` for TOP, the failing
    /// count for CUT.
    pub fn resolve(&self, dataset: &Dataset) -> Result<usize, EvalError> {
        let omega = match *self {
            Budget::Top(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(EvalError::InvalidFraction(f));
                }
                if dataset.is_empty() {
                    0
                } else {
                    crate::detector::nearest_rank(f, dataset.len())
                }
            }
            Budget::Cut => {
                require_labels(dataset)?;
                match dataset.failing_count() {
                    0 => return Err(EvalError::NoFailingSamples),
                    n => n,
                }
            }
        };
        if omega == 0 {
            return Err(EvalError::EmptyBudget);
        }
        Ok(omega)
    }

    pub fn mode(&self) -> &'static str {
        match self {
            Budget::Top(_) => "top",
            Budget::Cut => "cut",
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Top(x) => write!(f, "top:{x}"),
            Budget::Cut => f.write_str("cut"),
        }
    }
}

impl FromStr for Budget {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("cut") {
            return Ok(Budget::Cut);
        }
        let fraction = s
            .strip_prefix("top:")
            .or_else(|| s.strip_prefix("TOP:"))
            .and_then(|x| x.parse::<f64>().ok())
            .ok_or_else(|| EvalError::BadBudget(s.to_string()))?;
        Budget::top(fraction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetReport {
    pub mode: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    pub omega: usize,
}

impl BudgetReport {
    pub fn new(budget: &Budget, omega: usize) -> Self {
        BudgetReport {
            mode: budget.mode(),
            fraction: match budget {
                Budget::Top(f) => Some(*f),
                Budget::Cut => None,
            },
            omega,
        }
    }
}

/// Map key for a threshold, e.g. `0.9`.
pub fn theta_key(theta: f64) -> String {
    theta.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub dataset_size: usize,
    pub failing_count: usize,
    pub failing_ratio: f64,
    /// Failing samples that pass the rejector, per theta.
    pub subtle_count_by_theta: BTreeMap<String, usize>,
    /// Subtle count over the number of samples passing the rejector.
    pub subtle_ratio_by_theta: BTreeMap<String, f64>,
}

pub fn dataset_stats(dataset: &Dataset, thetas: &[RejectorSpec]) -> Result<DatasetStats, EvalError> {
    require_labels(dataset)?;
    let n = dataset.len();
    let failing_count = dataset.failing_count();
    let mut subtle_count_by_theta = BTreeMap::new();
    let mut subtle_ratio_by_theta = BTreeMap::new();
    for spec in thetas {
        let passing: Vec<_> = dataset
            .iter()
            .filter(|r| spec.passes(r.confidence()))
            .collect();
        let subtle = passing
            .iter()
            .filter(|r| r.is_failing() == Some(true))
            .count();
        let ratio = if passing.is_empty() {
            0.0
        } else {
            subtle as f64 / passing.len() as f64
        };
        subtle_count_by_theta.insert(theta_key(spec.theta()), subtle);
        subtle_ratio_by_theta.insert(theta_key(spec.theta()), ratio);
    }
    Ok(DatasetStats {
        dataset_size: n,
        failing_count,
        failing_ratio: if n == 0 {
            0.0
        } else {
            failing_count as f64 / n as f64
        },
        subtle_count_by_theta,
        subtle_ratio_by_theta,
    })
}

/// Checks that `ranked` is a permutation of the dataset's sample ids.
pub fn check_ranking(ranked: &RankedList, dataset: &Dataset) -> Result<(), EvalError> {
    if ranked.len() != dataset.len() {
        return Err(EvalError::RankingMismatch(format!(
            "{} ranked entries for {} records",
            ranked.len(),
            dataset.len()
        )));
    }
    let mut seen = HashSet::with_capacity(ranked.len());
    for id in ranked.ids() {
        if dataset.get(id).is_none() {
            return Err(EvalError::RankingMismatch(format!("unknown sample_id {id:?}")));
        }
        if !seen.insert(id) {
            return Err(EvalError::RankingMismatch(format!("sample_id {id:?} ranked twice")));
        }
    }
    Ok(())
}

/// `(discovered_failing, discovered_subtle)` among the first `omega` ranked
/// samples.
pub fn discovered_counts_at(
    ranked: &RankedList,
    dataset: &Dataset,
    omega: usize,
    spec: &RejectorSpec,
) -> Result<(usize, usize), EvalError> {
    if omega == 0 {
        return Err(EvalError::EmptyBudget);
    }
    if omega > dataset.len() || omega > ranked.len() {
        return Err(EvalError::BudgetExceedsDataset {
            omega,
            size: dataset.len(),
        });
    }
    let mut failing = 0;
    let mut subtle = 0;
    for e in ranked.top(omega) {
        let r = dataset
            .get(&e.sample_id)
            .ok_or_else(|| EvalError::RankingMismatch(format!("unknown sample_id {:?}", e.sample_id)))?;
        let is_failing = r.is_failing().ok_or_else(|| EvalError::UnlabeledRecords {
            count: 1,
            first: r.sample_id().to_string(),
        })?;
        if is_failing {
            failing += 1;
            if spec.passes(r.confidence()) {
                subtle += 1;
            }
        }
    }
    Ok((failing, subtle))
}

pub fn discovered_counts(
    ranked: &RankedList,
    dataset: &Dataset,
    budget: &Budget,
    spec: &RejectorSpec,
) -> Result<(usize, usize), EvalError> {
    discovered_counts_at(ranked, dataset, budget.resolve(dataset)?, spec)
}

pub fn throughput_ratio(discovered_subtle: usize, dataset: &Dataset) -> Result<f64, EvalError> {
    require_labels(dataset)?;
    match dataset.failing_count() {
        0 => Err(EvalError::NoFailingSamples),
        n => Ok(discovered_subtle as f64 / n as f64),
    }
}

/// Discovered failing count over the count a uniformly random ranking is
/// expected to find with the same budget.
pub fn improvement_over_random(
    discovered_failing: usize,
    omega: usize,
    dataset: &Dataset,
) -> Result<f64, EvalError> {
    require_labels(dataset)?;
    if omega == 0 {
        return Err(EvalError::EmptyBudget);
    }
    let failing = dataset.failing_count();
    if failing == 0 {
        return Err(EvalError::NoFailingSamples);
    }
    let failing_ratio = failing as f64 / dataset.len() as f64;
    Ok(discovered_failing as f64 / (omega as f64 * failing_ratio))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub p_two_sided: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub z: f64,
    pub zero_method: &'static str,
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped. Absolute differences receive average ranks
/// on ties. The p-value uses the normal approximation with tie-corrected
/// variance and a continuity correction of 0.5.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n < 6 {
        return Err(EvalError::TooFewPairs(n));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && diffs[order[end]].abs() == diffs[order[start]].abs() {
            end += 1;
        }
        // positions start..end share the average of ranks start+1..=end
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = avg;
        }
        let t = (end - start) as f64;
        tie_term += t * t * t - t;
        start = end;
    }

    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let nf = n as f64;
    let total = nf * (nf + 1.0) / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((statistic - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let p = erfc(z / std::f64::consts::SQRT_2).clamp(f64::MIN_POSITIVE, 1.0);

    Ok(WilcoxonResult {
        statistic,
        p_two_sided: p,
        w_plus,
        w_minus,
        n,
        z,
        zero_method: "wilcox",
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceRow {
    pub rank: usize,
    pub sample_id: String,
    pub confidence: f64,
}

/// Confidences of the first `k` failing samples in ranking order.
pub fn top_failing_confidences(
    ranked: &RankedList,
    dataset: &Dataset,
    k: usize,
) -> Result<Vec<ConfidenceRow>, EvalError> {
    let mut rows = Vec::with_capacity(k);
    for (i, e) in ranked.entries().iter().enumerate() {
        if rows.len() == k {
            break;
        }
        let r = dataset
            .get(&e.sample_id)
            .ok_or_else(|| EvalError::RankingMismatch(format!("unknown sample_id {:?}", e.sample_id)))?;
        match r.is_failing() {
            Some(true) => rows.push(ConfidenceRow {
                rank: i + 1,
                sample_id: e.sample_id.clone(),
                confidence: r.confidence(),
            }),
            Some(false) => {}
            None => {
                return Err(EvalError::UnlabeledRecords {
                    count: 1,
                    first: e.sample_id.clone(),
                })
            }
        }
    }
    Ok(rows)
}

/// Writes `method,rank,sample_id,confidence` rows, one group per method.
pub fn write_confidence_csv<W: Write>(
    groups: &[(String, Vec<ConfidenceRow>)],
    out: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "rank", "sample_id", "confidence"])?;
    for (method, rows) in groups {
        for r in rows {
            w.write_record([
                method.clone(),
                r.rank.to_string(),
                r.sample_id.clone(),
                r.confidence.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Counts of the four correctness/confidence cases for the plain model H,
/// plus what the detector removes from the accepted cases for H'.
///
/// * `a`: correct, passes the rejector
/// * `b`: failing, passes the rejector
/// * `c`: correct, rejected
/// * `d`: failing, rejected
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadrantCounts {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub d: usize,
    pub detector_rejected_correct: usize,
    pub detector_rejected_failing: usize,
    /// Accuracy of H on accepted samples, `a / (a + b)`.
    pub accuracy_h: Option<f64>,
    /// Accuracy of H' on accepted samples.
    pub accuracy_h_prime: Option<f64>,
    /// Accuracy of the bare classifier, `(a + c) / (a + b + c + d)`.
    pub accuracy_m: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn quadrant_counts(
    dataset: &Dataset,
    spec: &RejectorSpec,
    detector: Option<&DetectorModel>,
) -> Result<QuadrantCounts, EvalError> {
    require_labels(dataset)?;
    let (mut a, mut b, mut c, mut d, mut dc, mut df) = (0, 0, 0, 0, 0, 0);
    for r in dataset {
        let failing = r.is_failing() == Some(true);
        let decision = two_stage_decide(r, spec, detector)?;
        match (decision, failing) {
            (Decision::RejectedByR, false) => c += 1,
            (Decision::RejectedByR, true) => d += 1,
            (Decision::Predicted(_), false) => a += 1,
            (Decision::Predicted(_), true) => b += 1,
            (Decision::RejectedByD, false) => {
                a += 1;
                dc += 1
            }
            (Decision::RejectedByD, true) => {
                b += 1;
                df += 1
            }
        }
    }
    Ok(QuadrantCounts {
        a,
        b,
        c,
        d,
        detector_rejected_correct: dc,
        detector_rejected_failing: df,
        accuracy_h: ratio(a, a + b),
        accuracy_h_prime: ratio(a - dc, (a - dc) + (b - df)),
        accuracy_m: ratio(a + c, a + b + c + d),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThetaMetrics {
    pub discovered_subtle: usize,
    pub throughput_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodMetrics {
    pub discovered_failing: usize,
    pub improvement_over_random: f64,
    pub by_theta: BTreeMap<String, ThetaMetrics>,
    /// Mean confidence of the first `k` failing samples in the ranking.
    pub top_failing_mean_confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Definitions {
    pub passes_rejector: &'static str,
    pub throughput_ratio: &'static str,
    pub improvement_over_random: &'static str,
}

impl Default for Definitions {
    fn default() -> Self {
        Definitions {
            passes_rejector: PASSES_REJECTOR_DEFINITION,
            throughput_ratio: THROUGHPUT_DEFINITION,
            improvement_over_random: IMPROVEMENT_DEFINITION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub spec_version: u32,
    #[serde(flatten)]
    pub stats: DatasetStats,
    pub thetas: Vec<f64>,
    pub budget: BudgetReport,
    pub top_failing_k: usize,
    pub methods: BTreeMap<String, MethodMetrics>,
    pub definitions: Definitions,
}

/// Evaluates several rankings of the same labeled dataset.
pub fn evaluate_rankings(
    dataset: &Dataset,
    rankings: &[(String, RankedList)],
    budget: &Budget,
    thetas: &[RejectorSpec],
    top_failing_k: usize,
) -> Result<EvalReport, EvalError> {
    let stats = dataset_stats(dataset, thetas)?;
    let omega = budget.resolve(dataset)?;
    let mut methods = BTreeMap::new();
    for (name, ranked) in rankings {
        check_ranking(ranked, dataset)?;
        let mut by_theta = BTreeMap::new();
        let mut discovered_failing = 0;
        for spec in thetas {
            let (f, s) = discovered_counts_at(ranked, dataset, omega, spec)?;
            discovered_failing = f;
            by_theta.insert(
                theta_key(spec.theta()),
                ThetaMetrics {
                    discovered_subtle: s,
                    throughput_ratio: throughput_ratio(s, dataset)?,
                },
            );
        }
        if thetas.is_empty() {
            // failing count does not depend on theta; any valid spec works
            let spec = RejectorSpec::new(0.5).expect("0.5 is a valid theta");
            discovered_failing = discovered_counts_at(ranked, dataset, omega, &spec)?.0;
        }
        let top = top_failing_confidences(ranked, dataset, top_failing_k)?;
        methods.insert(
            name.clone(),
            MethodMetrics {
                discovered_failing,
                improvement_over_random: improvement_over_random(discovered_failing, omega, dataset)?,
                by_theta,
                top_failing_mean_confidence: mean(top.iter().map(|r| r.confidence)),
            },
        );
    }
    Ok(EvalReport {
        spec_version: REPORT_VERSION,
        stats,
        thetas: thetas.iter().map(|t| t.theta()).collect(),
        budget: BudgetReport::new(budget, omega),
        top_failing_k,
        methods,
        definitions: Definitions::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::RankedEntry;
    use crate::record::PredictionRecord;

    fn rec(id: &str, conf: f64, failing: bool) -> PredictionRecord {
        let label = if failing { 1 } else { 0 };
        PredictionRecord::new(id, vec![conf, 1.0 - conf], vec![], Some(label), None).unwrap()
    }

    fn theta(t: f64) -> RejectorSpec {
        RejectorSpec::new(t).unwrap()
    }

    fn ranking(ids: &[&str]) -> RankedList {
        RankedList::from_entries(
            ids.iter()
                .enumerate()
                .map(|(i, id)| RankedEntry {
                    sample_id: id.to_string(),
                    key: i as f64,
                })
                .collect(),
        )
    }

    #[test]
    fn stats_all_correct() {
        let d = Dataset::new(vec![rec("a", 0.9, false), rec("b", 0.6, false)]).unwrap();
        let s = dataset_stats(&d, &[theta(0.7), theta(0.9)]).unwrap();
        assert_eq!(s.failing_ratio, 0.0);
        assert!(s.subtle_ratio_by_theta.values().all(|&r| r == 0.0));
    }

    #[test]
    fn stats_hand_count() {
        // 1 failing of 10 at 0.95; 4 records above 0.9
        let mut recs = vec![rec("f", 0.95, true)];
        for (i, c) in [0.91, 0.93, 0.99, 0.6, 0.6, 0.7, 0.8, 0.55, 0.85].iter().enumerate() {
            recs.push(rec(&format!("c{i}"), *c, false));
        }
        let d = Dataset::new(recs).unwrap();
        let s = dataset_stats(&d, &[theta(0.9)]).unwrap();
        assert_eq!(s.failing_ratio, 0.1);
        assert_eq!(s.subtle_ratio_by_theta["0.9"], 0.25);
        assert_eq!(s.subtle_count_by_theta["0.9"], 1);
    }

    #[test]
    fn unlabeled_rejected() {
        let r = PredictionRecord::new("u", vec![0.5, 0.5], vec![], None, None).unwrap();
        let d = Dataset::new(vec![r]).unwrap();
        assert!(matches!(
            dataset_stats(&d, &[theta(0.5)]),
            Err(EvalError::UnlabeledRecords { count: 1, .. })
        ));
    }

    #[test]
    fn budget_resolution() {
        let recs: Vec<_> = (0..25).map(|i| rec(&format!("r{i}"), 0.8, i % 5 == 0)).collect();
        let d = Dataset::new(recs).unwrap();
        assert_eq!(Budget::top(0.1).unwrap().resolve(&d).unwrap(), 3);
        assert_eq!(Budget::Cut.resolve(&d).unwrap(), 5);
        assert_eq!("top:0.1".parse::<Budget>().unwrap(), Budget::Top(0.1));
        assert_eq!("cut".parse::<Budget>().unwrap(), Budget::Cut);
        assert!("top:0".parse::<Budget>().is_err());
        assert!("bottom".parse::<Budget>().is_err());
    }

    #[test]
    fn counts_full_budget_and_single() {
        let d = Dataset::new(vec![
            rec("a", 0.95, true),
            rec("b", 0.6, true),
            rec("c", 0.99, false),
        ])
        .unwrap();
        let r = ranking(&["a", "c", "b"]);
        let t = theta(0.9);
        assert_eq!(discovered_counts_at(&r, &d, 3, &t).unwrap(), (2, 1));
        assert_eq!(discovered_counts_at(&r, &d, 1, &t).unwrap(), (1, 1));
        assert!(matches!(
            discovered_counts_at(&r, &d, 0, &t),
            Err(EvalError::EmptyBudget)
        ));
        assert!(matches!(
            discovered_counts_at(&r, &d, 4, &t),
            Err(EvalError::BudgetExceedsDataset { .. })
        ));
        assert_eq!(discovered_counts(&r, &d, &Budget::Cut, &t).unwrap(), (1, 1));
    }

    #[test]
    fn throughput_examples() {
        let d = Dataset::new(vec![rec("a", 0.95, true), rec("b", 0.96, true), rec("c", 0.9, false)]).unwrap();
        assert_eq!(throughput_ratio(0, &d).unwrap(), 0.0);
        assert_eq!(throughput_ratio(2, &d).unwrap(), 1.0);
        let none = Dataset::new(vec![rec("c", 0.9, false)]).unwrap();
        assert!(matches!(throughput_ratio(0, &none), Err(EvalError::NoFailingSamples)));
    }

    #[test]
    fn improvement_closed_form() {
        // failing ratio 0.25, perfect ranking, omega = failing count
        let recs: Vec<_> = (0..20).map(|i| rec(&format!("r{i}"), 0.8, i < 5)).collect();
        let d = Dataset::new(recs).unwrap();
        assert_eq!(improvement_over_random(5, 5, &d).unwrap(), 4.0);
        // the random expectation itself: omega * ratio
        assert_eq!(improvement_over_random(2, 8, &d).unwrap(), 1.0);
    }

    #[test]
    fn wilcoxon_all_zero() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(EvalError::TooFewPairs(0))));
        assert!(matches!(
            wilcoxon_signed_rank(&a, &a[..6]),
            Err(EvalError::LengthMismatch(7, 6))
        ));
    }

    #[test]
    fn wilcoxon_known_value() {
        // differences 1..=8 all positive: W- = 0, mean 18, var 51
        let a: Vec<f64> = (1..=8).map(|x| x as f64).collect();
        let b = vec![0.0; 8];
        let w = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(w.statistic, 0.0);
        assert_eq!(w.w_plus, 36.0);
        let z = 17.5 / 51f64.sqrt();
        assert!((w.z - z).abs() < 1e-12);
        assert!((w.p_two_sided - erfc(z / std::f64::consts::SQRT_2)).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_average_ranks() {
        // |d| = 1,1,2,2,2,3 -> ranks 1.5,1.5,4,4,4,6; signs + - + + - +
        let a = [1.0, -1.0, 2.0, 2.0, -2.0, 3.0];
        let b = [0.0; 6];
        let w = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(w.w_plus, 1.5 + 4.0 + 4.0 + 6.0);
        assert_eq!(w.w_minus, 1.5 + 4.0);
        // tie correction: (8-2) + (27-3) = 30 -> 30/48
        let var: f64 = 6.0 * 7.0 * 13.0 / 24.0 - 30.0 / 48.0;
        let z = ((5.5f64 - 10.5).abs() - 0.5) / var.sqrt();
        assert!((w.z - z).abs() < 1e-12);
    }

    #[test]
    fn confidence_rows() {
        let d = Dataset::new(vec![rec("a", 0.95, true), rec("b", 0.6, false), rec("c", 0.7, true)]).unwrap();
        let rows = top_failing_confidences(&ranking(&["b", "c", "a"]), &d, 50).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].rank, 2);
        assert_eq!(rows[0].confidence, 0.7);
        let mut buf = Vec::new();
        write_confidence_csv(&[("x".into(), rows)], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "method,rank,sample_id,confidence\nx,2,c,0.7\nx,3,a,0.95\n"
        );
    }

    #[test]
    fn quadrants_without_detector() {
        let d = Dataset::new(vec![
            rec("a", 0.95, false),
            rec("b", 0.95, true),
            rec("c", 0.6, false),
            rec("d", 0.6, true),
            rec("e", 0.99, false),
        ])
        .unwrap();
        let q = quadrant_counts(&d, &theta(0.7), None).unwrap();
        assert_eq!((q.a, q.b, q.c, q.d), (2, 1, 1, 1));
        assert_eq!(q.detector_rejected_correct + q.detector_rejected_failing, 0);
        assert_eq!(q.accuracy_h, Some(2.0 / 3.0));
        assert_eq!(q.accuracy_h, q.accuracy_h_prime);
        assert_eq!(q.accuracy_m, Some(0.6));
    }

    #[test]
    fn report_shape() {
        let recs: Vec<_> = (0..20).map(|i| rec(&format!("r{i:02}"), 0.75 + 0.01 * i as f64, i % 4 == 0)).collect();
        let d = Dataset::new(recs).unwrap();
        let ids: Vec<String> = (0..20).map(|i| format!("r{i:02}")).collect();
        let r = ranking(&ids.iter().map(String::as_str).collect::<Vec<_>>());
        let report = evaluate_rankings(
            &d,
            &[("x".into(), r)],
            &Budget::Cut,
            &[theta(0.7), theta(0.9)],
            50,
        )
        .unwrap();
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["spec_version"], 1);
        assert_eq!(json["failing_count"], 5);
        assert_eq!(json["budget"]["omega"], 5);
        assert_eq!(json["methods"]["x"]["discovered_failing"], 2);
        assert!(json["subtle_ratio_by_theta"]["0.9"].is_number());
    }
}
