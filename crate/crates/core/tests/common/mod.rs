//! Fixtures and independent oracles shared by the integration tests.
//!
//! Nothing here calls into the library's scoring or fitting code.
//! Oracles are written from the definitions so that a shared bug cannot
//! hide on both sides of a comparison.

#![allow(dead_code)]

use a3rank::record::parse_record;
use a3rank::synth::{build_world, SyntheticWorld, WorldConfig};
use a3rank::PredictionRecord;
use rand::Rng;

pub const WORKED_EXAMPLE_LINE: &str = include_str!("../data/worked_example.jsonl");

pub fn worked_example() -> PredictionRecord {
    parse_record(WORKED_EXAMPLE_LINE.trim()).unwrap()
}

/// The pinned world: default config, seed 42.
pub fn pinned_world() -> SyntheticWorld {
    build_world(&WorldConfig::default()).unwrap()
}

/// A random probability vector. Half of the draws are multiples of 1/20 so
/// that argmax and vote ties actually occur.
pub fn random_probs<R: Rng>(rng: &mut R, c: usize) -> Vec<f64> {
    if rng.random_bool(0.5) {
        let mut counts = vec![0u32; c];
        for _ in 0..20 {
            let k = if rng.random_bool(0.6) {
                rng.random_range(0..c.min(3))
            } else {
                rng.random_range(0..c)
            };
            counts[k] += 1;
        }
        counts.iter().map(|&n| n as f64 / 20.0).collect()
    } else {
        softmax_of(rng, c)
    }
}

/// Continuous draw; components are distinct with probability one.
pub fn softmax_of<R: Rng>(rng: &mut R, c: usize) -> Vec<f64> {
    let scale = rng.random_range(0.5..6.0);
    let logits: Vec<f64> = (0..c).map(|_| rng.random::<f64>() * scale).collect();
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

pub fn random_record<R: Rng>(rng: &mut R, id: &str, c: usize, max_variants: usize) -> PredictionRecord {
    let probs = random_probs(rng, c);
    let n = rng.random_range(0..=max_variants);
    let variants = (0..n)
        .map(|i| (format!("op{i}"), random_probs(rng, c)))
        .collect();
    let label = rng.random_bool(0.8).then(|| rng.random_range(0..c));
    PredictionRecord::new(id, probs, variants, label, None).unwrap()
}

pub fn raw_variants(r: &PredictionRecord) -> Vec<Vec<f64>> {
    r.variants().iter().map(|v| v.probs.as_slice().to_vec()).collect()
}

/// First index holding the largest value.
pub fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Brute force: collect every voted class with its vote count and mean top
/// probability, sort by count desc, mean desc, index asc, take the first.
/// Top probabilities are summed smallest first, so the mean does not depend
/// on variant order.
pub fn oracle_majority(probs: &[f64], variants: &[Vec<f64>]) -> usize {
    if variants.is_empty() {
        return first_argmax(probs);
    }
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for class in 0..probs.len() {
        let voters: Vec<&Vec<f64>> = variants
            .iter()
            .filter(|v| first_argmax(v) == class)
            .collect();
        if voters.is_empty() {
            continue;
        }
        let mut tops: Vec<f64> = voters.iter().map(|v| v[class]).collect();
        tops.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let sum: f64 = tops.iter().sum();
        candidates.push((class, voters.len(), sum / voters.len() as f64));
    }
    candidates.sort_by(|x, y| {
        y.1.cmp(&x.1)
            .then(y.2.total_cmp(&x.2))
            .then(x.0.cmp(&y.0))
    });
    candidates[0].0
}

#[derive(Debug, Clone, Copy)]
pub struct OracleScore {
    pub p: usize,
    pub m: usize,
    pub sum_g1: f64,
    pub sum_g2: f64,
    pub sum_g3: f64,
    pub score: f64,
}

/// Straight-line score: one pass over the variants, roles tested inline.
pub fn oracle_score(probs: &[f64], variants: &[Vec<f64>]) -> OracleScore {
    let p = first_argmax(probs);
    let m = oracle_majority(probs, variants);
    let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
    for v in variants {
        let q = first_argmax(v);
        if q != p && q != m {
            s1 += v[q] - v[p];
        }
        if q == p {
            s2 += v[p] - v[m];
        }
        if q == m {
            s3 += (v[p] - v[m]) + (probs[m] - probs[p]);
        }
    }
    OracleScore {
        p,
        m,
        sum_g1: s1,
        sum_g2: s2,
        sum_g3: s3,
        score: probs[p] - s1 + s2 + s3,
    }
}

/// Exact two-sided Wilcoxon p from all `2^n` sign assignments of the
/// observed (average) ranks. Zero differences are dropped first.
pub fn exact_wilcoxon_p(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = d.len();
    let ranks: Vec<f64> = d
        .iter()
        .map(|di| {
            let below = d.iter().filter(|x| x.abs() < di.abs()).count() as f64;
            let equal = d.iter().filter(|x| x.abs() == di.abs()).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let center = total / 2.0;
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let observed = (w_plus - center).abs();
    let mut extreme = 0u64;
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if (w - center).abs() >= observed - 1e-9 {
            extreme += 1;
        }
    }
    extreme as f64 / (1u64 << n) as f64
}

/// Detector radius computed directly: standardize with population std
/// (floored at 1e-8), center on the standardized mean, sort the distances,
/// take position `ceil(k * n / 100)` in integer arithmetic.
pub fn oracle_radius(points: &[Vec<f64>], percent: u64) -> f64 {
    let n = points.len();
    let dim = points[0].len();
    let mut z = vec![vec![0.0; dim]; n];
    for j in 0..dim {
        let col: Vec<f64> = points.iter().map(|p| p[j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt().max(1e-8);
        for i in 0..n {
            z[i][j] = (col[i] - mean) / sd;
        }
    }
    let center: Vec<f64> = (0..dim)
        .map(|j| z.iter().map(|row| row[j]).sum::<f64>() / n as f64)
        .collect();
    let mut dist: Vec<f64> = z
        .iter()
        .map(|row| {
            row.iter()
                .zip(&center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    dist.sort_by(f64::total_cmp);
    let k = ((percent * n as u64).div_ceil(100)).max(1) as usize;
    dist[k - 1]
}
