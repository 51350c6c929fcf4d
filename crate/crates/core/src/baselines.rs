//! Rankers: the alignment score and the reference baselines.
//!
//! | method     | key                    | order      |
//! |------------|------------------------|------------|
//! | `a3`       | alignment score        | ascending  |
//! | `gini`     | Gini impurity          | descending |
//! | `msp`      | max softmax probability| ascending  |
//! | `random`   | seeded uniform draw    | ascending  |
//!
//! Equal keys are ordered by `sample_id` ascending.

use std::cmp::Ordering;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::alignment::{a3_score, TermSet};
use crate::record::{Dataset, PredictionVector};

/// Stream of the ChaCha8 generator reserved for the random ranker.
pub const RANDOM_RANKER_STREAM: u64 = 1;

pub fn deep_gini(v: &PredictionVector) -> f64 {
    1.0 - v.as_slice().iter().map(|p| p * p).sum::<f64>()
}

pub fn msp_confidence(v: &PredictionVector) -> f64 {
    v.max()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    A3,
    #[serde(rename = "gini")]
    DeepGini,
    Msp,
    Random,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::A3 => "a3",
            Method::DeepGini => "gini",
            Method::Msp => "msp",
            Method::Random => "random",
        }
    }

    pub fn descending(&self) -> bool {
        matches!(self, Method::DeepGini)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = RankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "a3" => Ok(Method::A3),
            "gini" | "deepgini" => Ok(Method::DeepGini),
            "msp" => Ok(Method::Msp),
            "random" => Ok(Method::Random),
            other => Err(RankError::UnknownMethod(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum RankError {
    #[error("unknown ranking method {0:?}")]
    UnknownMethod(String),
    #[error("the random ranker requires a seed")]
    MissingSeed,
    #[error("a seed is only meaningful for the random ranker")]
    UnexpectedSeed,
    #[error("term ablation only applies to the a3 ranker")]
    AblationNotSupported,
    #[error("ranking CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("ranking CSV line {line}: {message}")]
    BadRow { line: usize, message: String },
}

/// Which ranker to run. `seed` is present exactly for [`Method::Random`];
/// `ablate` may be non-empty only for [`Method::A3`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankerSpec {
    method: Method,
    seed: Option<u64>,
    ablate: TermSet,
}

impl RankerSpec {
    pub fn new(method: Method, seed: Option<u64>) -> Result<Self, RankError> {
        match (method, seed) {
            (Method::Random, None) => Err(RankError::MissingSeed),
            (Method::Random, Some(_)) | (_, None) => Ok(RankerSpec {
                method,
                seed,
                ablate: TermSet::NONE,
            }),
            (_, Some(_)) => Err(RankError::UnexpectedSeed),
        }
    }

    pub fn a3() -> Self {
        RankerSpec {
            method: Method::A3,
            seed: None,
            ablate: TermSet::NONE,
        }
    }

    pub fn a3_ablated(drop: TermSet) -> Self {
        RankerSpec {
            method: Method::A3,
            seed: None,
            ablate: drop,
        }
    }

    pub fn deep_gini() -> Self {
        RankerSpec::new(Method::DeepGini, None).unwrap()
    }

    pub fn msp() -> Self {
        RankerSpec::new(Method::Msp, None).unwrap()
    }

    pub fn random(seed: u64) -> Self {
        RankerSpec::new(Method::Random, Some(seed)).unwrap()
    }

    pub fn with_ablation(mut self, drop: TermSet) -> Result<Self, RankError> {
        if self.method != Method::A3 && !drop.is_empty() {
            return Err(RankError::AblationNotSupported);
        }
        self.ablate = drop;
        Ok(self)
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn ablate(&self) -> TermSet {
        self.ablate
    }

    /// Short label such as `a3`, `a3-g2` or `random`.
    pub fn label(&self) -> String {
        format!("{}{}", self.method.name(), self.ablate.suffix())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedEntry {
    pub sample_id: String,
    pub key: f64,
}

/// Samples in priority order (most suspicious first).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedList {
    entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn from_entries(entries: Vec<RankedEntry>) -> Self {
        RankedList { entries }
    }

    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.sample_id.as_str())
    }

    pub fn top(&self, omega: usize) -> &[RankedEntry] {
        &self.entries[..omega.min(self.entries.len())]
    }

    /// Writes `rank,sample_id,key` with 1-based ranks. Keys use the shortest
    /// representation that parses back to the same `f64`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), RankError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rank", "sample_id", "key"])?;
        for (i, e) in self.entries.iter().enumerate() {
            w.write_record([(i + 1).to_string(), e.sample_id.clone(), e.key.to_string()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads a ranking written by [`RankedList::write_csv`]. Rows are taken
    /// in rank order; the `rank` column must count 1, 2, 3, ...
    pub fn read_csv<R: Read>(input: R) -> Result<Self, RankError> {
        let mut r = csv::Reader::from_reader(input);
        let mut entries = Vec::new();
        for (i, row) in r.records().enumerate() {
            let row = row?;
            let line = i + 2;
            if row.len() != 3 {
                return Err(RankError::BadRow {
                    line,
                    message: format!("expected 3 columns, got {}", row.len()),
                });
            }
            let rank: usize = row[0].parse().map_err(|_| RankError::BadRow {
                line,
                message: format!("bad rank {:?}", &row[0]),
            })?;
            if rank != i + 1 {
                return Err(RankError::BadRow {
                    line,
                    message: format!("rank {rank} out of sequence"),
                });
            }
            let key: f64 = row[2].parse().map_err(|_| RankError::BadRow {
                line,
                message: format!("bad key {:?}", &row[2]),
            })?;
            entries.push(RankedEntry {
                sample_id: row[1].to_string(),
                key,
            });
        }
        Ok(RankedList { entries })
    }
}

/// Uniform draw in [0, 1) from the top 53 bits of a ChaCha8 output word.
fn unit_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Per-sample ranking keys in dataset order.
pub fn ranking_keys(dataset: &Dataset, spec: &RankerSpec) -> Vec<f64> {
    let records = dataset.records();
    match spec.method {
        Method::A3 => {
            let drop = spec.ablate;
            records
                .par_iter()
                .map(|r| a3_score(r).score_without(drop))
                .collect()
        }
        Method::DeepGini => records.par_iter().map(|r| deep_gini(r.probs())).collect(),
        Method::Msp => records
            .par_iter()
            .map(|r| msp_confidence(r.probs()))
            .collect(),
        Method::Random => {
            // Sequential: the draw sequence must not depend on scheduling.
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.expect("validated spec"));
            rng.set_stream(RANDOM_RANKER_STREAM);
            records.iter().map(|_| unit_f64(&mut rng)).collect()
        }
    }
}

/// Orders the whole dataset. Key computation runs on the current rayon pool;
/// the result does not depend on the pool size.
pub fn rank(dataset: &Dataset, spec: &RankerSpec) -> RankedList {
    let keys = ranking_keys(dataset, spec);
    let records = dataset.records();
    let mut order: Vec<usize> = (0..records.len()).collect();
    let descending = spec.method.descending();
    order.sort_by(|&a, &b| {
        let primary = if descending {
            keys[b].total_cmp(&keys[a])
        } else {
            keys[a].total_cmp(&keys[b])
        };
        match primary {
            Ordering::Equal => records[a].sample_id().cmp(records[b].sample_id()),
            o => o,
        }
    });
    RankedList {
        entries: order
            .into_iter()
            .map(|i| RankedEntry {
                sample_id: records[i].sample_id().to_string(),
                key: keys[i],
            })
            .collect(),
    }
}
