//! Shared fixtures for unit tests.

use rand::Rng;

use crate::record::{parse_record, PredictionRecord};

pub const WORKED_EXAMPLE_LINE: &str = include_str!("../tests/data/worked_example.jsonl");

pub fn worked_example() -> PredictionRecord {
    parse_record(WORKED_EXAMPLE_LINE).unwrap()
}

/// A random probability vector. Half of the draws are quantized to
/// multiples of 1/20 so that argmax and majority ties actually occur.
pub fn random_probs<R: Rng>(rng: &mut R, c: usize) -> Vec<f64> {
    if rng.random_bool(0.5) {
        let mut counts = vec![0u32; c];
        for _ in 0..20 {
            // bias toward a few classes for peaked vectors
            let k = if rng.random_bool(0.6) {
                rng.random_range(0..c.min(3))
            } else {
                rng.random_range(0..c)
            };
            counts[k] += 1;
        }
        counts.iter().map(|&n| n as f64 / 20.0).collect()
    } else {
        let scale = rng.random_range(0.5..6.0);
        let logits: Vec<f64> = (0..c).map(|_| rng.random::<f64>() * scale).collect();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|e| e / z).collect()
    }
}

pub fn random_record<R: Rng>(
    rng: &mut R,
    id: &str,
    c: usize,
    max_variants: usize,
) -> PredictionRecord {
    let probs = random_probs(rng, c);
    let n = rng.random_range(0..=max_variants);
    let variants = (0..n)
        .map(|i| (format!("op{i}"), random_probs(rng, c)))
        .collect();
    let label = rng.random_bool(0.8).then(|| rng.random_range(0..c));
    PredictionRecord::new(id, probs, variants, label, None).unwrap()
}
