mod common;

use a3rank::record::{parse_record, serialize_record};
use a3rank::rejection::{confidence_reject, subtle_flag, RejectorSpec};
use a3rank::{a3_score, majority_class, rank, Dataset, PredictionRecord, RankerSpec};
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(1000)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn record_from(seed: u64, c: usize, max_variants: usize) -> PredictionRecord {
    random_record(&mut rng(seed), "r", c, max_variants)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn serialization_round_trips(seed in any::<u64>(), c in 2usize..=10, with_features in any::<bool>()) {
        let mut g = rng(seed);
        let base = random_record(&mut g, "id-\"quoted\"", c, 6);
        let features = with_features.then(|| (0..4).map(|_| g.random::<f64>() * 1e3 - 5e2).collect());
        let r = PredictionRecord::new(
            base.sample_id(),
            base.probs().as_slice().to_vec(),
            raw_variants(&base).into_iter().enumerate().map(|(i, v)| (format!("op{i}"), v)).collect(),
            base.label(),
            features,
        ).unwrap();
        let line = serialize_record(&r);
        let back = parse_record(&line).unwrap();
        prop_assert_eq!(&back, &r);
        prop_assert_eq!(serialize_record(&back), line);
    }

    #[test]
    fn score_matches_straight_line_oracle(seed in any::<u64>(), c in 2usize..=10) {
        let r = record_from(seed, c, 20);
        let want = oracle_score(r.probs().as_slice(), &raw_variants(&r));
        let got = a3_score(&r);
        prop_assert_eq!(majority_class(&r), want.m);
        prop_assert!((got.score - want.score).abs() <= 1e-12);
        prop_assert!((got.sum_g1 - want.sum_g1).abs() <= 1e-12);
        prop_assert!((got.sum_g2 - want.sum_g2).abs() <= 1e-12);
        prop_assert!((got.sum_g3 - want.sum_g3).abs() <= 1e-12);
    }

    #[test]
    fn distractor_and_supporter_sums_non_negative(seed in any::<u64>(), c in 2usize..=10) {
        let b = a3_score(&record_from(seed, c, 20));
        prop_assert!(b.sum_g1 >= 0.0);
        prop_assert!(b.sum_g2 >= 0.0);
        for v in &b.per_variant {
            prop_assert!(v.g1.is_none_or(|g| g >= 0.0));
            prop_assert!(v.g2.is_none_or(|g| g >= 0.0));
        }
    }

    #[test]
    fn roles_partition_consistently(seed in any::<u64>(), c in 2usize..=10) {
        let b = a3_score(&record_from(seed, c, 20));
        for v in &b.per_variant {
            prop_assert!(!(v.role.is_distractor && (v.role.is_dominator || v.role.is_supporter)));
            prop_assert!(v.role.is_distractor || v.role.is_dominator || v.role.is_supporter);
            prop_assert_eq!(v.g1.is_some(), v.role.is_distractor);
            prop_assert_eq!(v.g2.is_some(), v.role.is_supporter);
            prop_assert_eq!(v.g3.is_some(), v.role.is_dominator);
        }
    }

    #[test]
    fn agreeing_variants_score_confidence(seed in any::<u64>(), c in 2usize..=10, n in 0usize..=20) {
        let mut g = rng(seed);
        let probs = softmax_of(&mut g, c);
        let variants = (0..n).map(|k| (format!("op{k}"), probs.clone())).collect();
        let r = PredictionRecord::new("a", probs, variants, None, None).unwrap();
        prop_assert_eq!(a3_score(&r).score, r.confidence());
    }

    #[test]
    fn variant_order_is_irrelevant(seed in any::<u64>(), c in 2usize..=10) {
        let mut g = rng(seed);
        let r = random_record(&mut g, "p", c, 20);
        let mut order: Vec<usize> = (0..r.variants().len()).collect();
        for k in (1..order.len()).rev() {
            order.swap(k, g.random_range(0..=k));
        }
        let a = a3_score(&r);
        let b = a3_score(&r.with_variants_permuted(&order));
        prop_assert_eq!(a.majority_class, b.majority_class);
        prop_assert!((a.score - b.score).abs() <= 1e-12);
    }

    #[test]
    fn class_relabeling_is_irrelevant(seed in any::<u64>(), c in 2usize..=10, n in 0usize..=20) {
        let mut g = rng(seed);
        let probs = softmax_of(&mut g, c);
        let variants: Vec<Vec<f64>> = (0..n).map(|_| softmax_of(&mut g, c)).collect();
        let mut perm: Vec<usize> = (0..c).collect();
        for k in (1..c).rev() {
            perm.swap(k, g.random_range(0..=k));
        }
        let move_classes = |v: &Vec<f64>| {
            let mut out = vec![0.0; c];
            for (k, x) in v.iter().enumerate() {
                out[perm[k]] = *x;
            }
            out
        };
        let build = |p: Vec<f64>, vs: Vec<Vec<f64>>| {
            let vs = vs.into_iter().enumerate().map(|(k, v)| (format!("op{k}"), v)).collect();
            PredictionRecord::new("x", p, vs, None, None).unwrap()
        };
        let a = a3_score(&build(probs.clone(), variants.clone()));
        let b = a3_score(&build(move_classes(&probs), variants.iter().map(move_classes).collect()));
        prop_assert_eq!(perm[a.majority_class], b.majority_class);
        prop_assert!((a.score - b.score).abs() <= 1e-12);
    }

    #[test]
    fn rejection_is_monotone_in_theta(seed in any::<u64>(), c in 2usize..=10, t1 in 0.001f64..0.999, t2 in 0.001f64..0.999) {
        let r = record_from(seed, c, 0);
        let (lo, hi) = (RejectorSpec::new(t1.min(t2)).unwrap(), RejectorSpec::new(t1.max(t2)).unwrap());
        if confidence_reject(&r, &lo) {
            prop_assert!(confidence_reject(&r, &hi));
        }
        if subtle_flag(&r, &hi) == Some(true) {
            prop_assert_eq!(subtle_flag(&r, &lo), Some(true));
        }
    }

    #[test]
    fn gini_and_msp_agree_for_two_classes(tops in prop::collection::btree_set(500_001u32..1_000_000, 2..40)) {
        // distinct top probabilities in (0.5, 1) make the inputs tie-free
        let mut g = rng(tops.len() as u64);
        let mut records: Vec<PredictionRecord> = tops
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let top = *t as f64 / 1e6;
                let probs = if g.random_bool(0.5) { vec![top, 1.0 - top] } else { vec![1.0 - top, top] };
                PredictionRecord::new(format!("s{i}"), probs, vec![], None, None).unwrap()
            })
            .collect();
        for k in (1..records.len()).rev() {
            records.swap(k, g.random_range(0..=k));
        }
        let d = Dataset::new(records).unwrap();
        let gini: Vec<String> = rank(&d, &RankerSpec::deep_gini()).ids().map(String::from).collect();
        let msp: Vec<String> = rank(&d, &RankerSpec::msp()).ids().map(String::from).collect();
        prop_assert_eq!(gini, msp);
    }
}
