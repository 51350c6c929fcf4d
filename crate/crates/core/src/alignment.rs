//! Augmentation alignment analysis.
//!
//! Each variant of a sample is assigned roles relative to the sample's
//! predicted class `p` and the majority class `m` of its variants:
//!
//! * dominator: the variant predicts `m`
//! * supporter: the variant predicts `p`
//! * distractor: the variant predicts neither
//!
//! A variant is both a dominator and a supporter when `p == m`. The score of a
//! sample starts from its prediction confidence, subtracts the distractor
//! terms and adds the supporter and dominator terms. Lower scores mean less
//! reliable predictions, so rankings sort ascending.

use serde::Serialize;

use crate::record::{PredictionRecord, PredictionVector, VariantPrediction};

/// Index of the largest component, smallest index on ties.
pub fn predicted_class(v: &PredictionVector) -> usize {
    v.argmax()
}

/// Class predicted by most variants of the record.
///
/// Count ties go to the class whose variants have the higher mean
/// confidence; remaining ties go to the smaller index. With no variants the
/// record's own predicted class is returned.
pub fn majority_class(record: &PredictionRecord) -> usize {
    let variants = record.variants();
    if variants.is_empty() {
        return record.predicted_class();
    }
    let c = record.num_classes();
    let mut votes: Vec<Vec<f64>> = vec![Vec::new(); c];
    for v in variants {
        let q = v.probs.argmax();
        votes[q].push(v.probs.get(q));
    }

    let mut best = None::<(usize, usize, f64)>;
    for (class, confs) in votes.iter_mut().enumerate() {
        if confs.is_empty() {
            continue;
        }
        // summing in sorted order keeps exact ties independent of variant order
        confs.sort_by(f64::total_cmp);
        let count = confs.len();
        let mean = confs.iter().sum::<f64>() / count as f64;
        let better = match best {
            None => true,
            Some((_, n, mu)) => count > n || (count == n && mean > mu),
        };
        if better {
            best = Some((class, count, mean));
        }
    }
    best.map(|(class, _, _)| class).expect("at least one variant")
}

/// Role flags of a variant. A distractor is never also a dominator or a
/// supporter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct VariantRole {
    pub is_dominator: bool,
    pub is_supporter: bool,
    pub is_distractor: bool,
}

pub fn classify_role(variant: &VariantPrediction, p: usize, m: usize) -> VariantRole {
    let q = variant.probs.argmax();
    VariantRole {
        is_dominator: q == m,
        is_supporter: q == p,
        is_distractor: q != m && q != p,
    }
}

/// Probability mass the predicted class `p` lacks to become the distractor's
/// top class. Non-negative.
pub fn g1(variant: &VariantPrediction, p: usize) -> f64 {
    variant.probs.max() - variant.probs.get(p)
}

/// Margin of `p` over `m` inside a supporter's prediction.
pub fn g2(variant: &VariantPrediction, p: usize, m: usize) -> f64 {
    variant.probs.get(p) - variant.probs.get(m)
}

/// Dominator term: the variant's margin of `p` over `m` plus the sample's
/// margin of `m` over `p`. Negative when the variants dominate against `p`.
pub fn g3(variant: &VariantPrediction, sample_probs: &PredictionVector, p: usize, m: usize) -> f64 {
    (variant.probs.get(p) - variant.probs.get(m)) + (sample_probs.get(m) - sample_probs.get(p))
}

/// Per-variant contribution. Terms are `None` for roles the variant does not
/// hold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantTerms {
    pub op_id: String,
    pub role: VariantRole,
    pub g1: Option<f64>,
    pub g2: Option<f64>,
    pub g3: Option<f64>,
}

/// Full score derivation for one record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentBreakdown {
    pub predicted_class: usize,
    pub confidence: f64,
    pub majority_class: usize,
    pub per_variant: Vec<VariantTerms>,
    pub sum_g1: f64,
    pub sum_g2: f64,
    pub sum_g3: f64,
    pub score: f64,
}

/// Alignment terms to leave out of a score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize)]
pub struct TermSet {
    pub g1: bool,
    pub g2: bool,
    pub g3: bool,
}

impl TermSet {
    pub const NONE: TermSet = TermSet {
        g1: false,
        g2: false,
        g3: false,
    };
    pub const ALL: TermSet = TermSet {
        g1: true,
        g2: true,
        g3: true,
    };

    pub fn only_g1() -> Self {
        TermSet { g1: true, ..Self::NONE }
    }

    pub fn only_g2() -> Self {
        TermSet { g2: true, ..Self::NONE }
    }

    pub fn only_g3() -> Self {
        TermSet { g3: true, ..Self::NONE }
    }

    pub fn is_empty(&self) -> bool {
        !(self.g1 || self.g2 || self.g3)
    }

    /// Parses a comma-separated list such as `g1,g3`. The empty string is
    /// the empty set.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut out = Self::NONE;
        for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match part {
                "g1" => out.g1 = true,
                "g2" => out.g2 = true,
                "g3" => out.g3 = true,
                other => return Err(format!("unknown alignment term {other:?}")),
            }
        }
        Ok(out)
    }

    /// Label such as `-g1-g3`, empty for the full score.
    pub fn suffix(&self) -> String {
        let mut s = String::new();
        for (on, name) in [(self.g1, "-g1"), (self.g2, "-g2"), (self.g3, "-g3")] {
            if on {
                s.push_str(name);
            }
        }
        s
    }
}

impl AlignmentBreakdown {
    /// Score with the given term sums zeroed.
    pub fn score_without(&self, drop: TermSet) -> f64 {
        let s1 = if drop.g1 { 0.0 } else { self.sum_g1 };
        let s2 = if drop.g2 { 0.0 } else { self.sum_g2 };
        let s3 = if drop.g3 { 0.0 } else { self.sum_g3 };
        self.confidence - s1 + s2 + s3
    }

    pub fn dominator_count(&self) -> usize {
        self.per_variant.iter().filter(|v| v.role.is_dominator).count()
    }

    pub fn supporter_count(&self) -> usize {
        self.per_variant.iter().filter(|v| v.role.is_supporter).count()
    }

    pub fn distractor_count(&self) -> usize {
        self.per_variant.iter().filter(|v| v.role.is_distractor).count()
    }
}

pub fn a3_score(record: &PredictionRecord) -> AlignmentBreakdown {
    let probs = record.probs();
    let p = probs.argmax();
    let confidence = probs.get(p);
    let m = majority_class(record);

    let mut per_variant = Vec::with_capacity(record.variants().len());
    let (mut sum_g1, mut sum_g2, mut sum_g3) = (0.0, 0.0, 0.0);
    for v in record.variants() {
        let role = classify_role(v, p, m);
        let t1 = role.is_distractor.then(|| g1(v, p));
        let t2 = role.is_supporter.then(|| g2(v, p, m));
        let t3 = role.is_dominator.then(|| g3(v, probs, p, m));
        sum_g1 += t1.unwrap_or(0.0);
        sum_g2 += t2.unwrap_or(0.0);
        sum_g3 += t3.unwrap_or(0.0);
        per_variant.push(VariantTerms {
            op_id: v.op_id.clone(),
            role,
            g1: t1,
            g2: t2,
            g3: t3,
        });
    }

    AlignmentBreakdown {
        predicted_class: p,
        confidence,
        majority_class: m,
        per_variant,
        sum_g1,
        sum_g2,
        sum_g3,
        score: confidence - sum_g1 + sum_g2 + sum_g3,
    }
}

pub fn ablated_score(record: &PredictionRecord, drop: TermSet) -> f64 {
    a3_score(record).score_without(drop)
}
