//! Seeded synthetic world. Gaussian blobs on a ring train a multinomial
//! logistic regression with augmentation; the trained model then emits a
//! prediction record for every evaluation point and its variants.
//!
//! Everything is a function of the config and its seed. Each random source
//! draws from its own ChaCha8 stream so emission order and thread count
//! cannot change the output.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::{Dataset, PredictionRecord, RecordError};
use crate::rejection::RejectorSpec;

/// Two ring coordinates plus 58 off-ring ones. The small training set
/// (30 points per class) lets the classifier overfit those extra
/// coordinates, which produces confidently wrong predictions.
pub const DEFAULT_DIM: usize = 60;

const TRAIN_STREAM: u64 = 10;
const EVAL_STREAM: u64 = 11;
const TRAIN_AUGMENT_STREAM: u64 = 12;
/// Emission uses stream `EMIT_STREAM_BASE + sample index`.
const EMIT_STREAM_BASE: u64 = 1 << 32;
/// Allowed loss increase before a step is rejected and the rate halved.
const LOSS_SLACK: f64 = 1e-6;
const MIN_LEARNING_RATE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch} (loss is NaN)")]
    DivergedTraining { epoch: usize },
    #[error(transparent)]
    Record(#[from] RecordError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AugmentKind {
    /// Adds a fixed offset to the input.
    Shift { offset: Vec<f64> },
    /// Adds isotropic Gaussian noise with this standard deviation.
    Noise { sigma: f64 },
    /// Multiplies every coordinate past the first two by `factor`, fading
    /// the off-ring detail while keeping the ring position.
    Fade { factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentOp {
    pub op_id: String,
    #[serde(flatten)]
    pub kind: AugmentKind,
}

impl AugmentOp {
    pub fn shift(op_id: impl Into<String>, offset: Vec<f64>) -> Self {
        AugmentOp {
            op_id: op_id.into(),
            kind: AugmentKind::Shift { offset },
        }
    }

    pub fn noise(op_id: impl Into<String>, sigma: f64) -> Self {
        AugmentOp {
            op_id: op_id.into(),
            kind: AugmentKind::Noise { sigma },
        }
    }

    pub fn fade(op_id: impl Into<String>, factor: f64) -> Self {
        AugmentOp {
            op_id: op_id.into(),
            kind: AugmentKind::Fade { factor },
        }
    }

    fn apply(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        match &self.kind {
            AugmentKind::Shift { offset } => x.iter().zip(offset).map(|(a, b)| a + b).collect(),
            AugmentKind::Noise { sigma } => x
                .iter()
                .map(|a| {
                    let e: f64 = StandardNormal.sample(rng);
                    a + sigma * e
                })
                .collect(),
            AugmentKind::Fade { factor } => x
                .iter()
                .enumerate()
                .map(|(i, a)| if i < 2 { *a } else { a * factor })
                .collect(),
        }
    }
}

/// Shifts by `step` along the two ring axes, in both directions.
pub fn axis_shifts(dim: usize, step: f64) -> Vec<AugmentOp> {
    let axis = |i: usize, s: f64| {
        let mut v = vec![0.0; dim];
        if i < dim {
            v[i] = s;
        }
        v
    };
    vec![
        AugmentOp::shift("shift:+x", axis(0, step)),
        AugmentOp::shift("shift:-x", axis(0, -step)),
        AugmentOp::shift("shift:+y", axis(1, step)),
        AugmentOp::shift("shift:-y", axis(1, -step)),
    ]
}

/// Mild jitter used while training.
pub fn default_train_ops(dim: usize) -> Vec<AugmentOp> {
    axis_shifts(dim, 0.3)
}

/// Variant ops for ranking: two shifts along the first axis and six fade
/// levels.
pub fn default_ops(dim: usize) -> Vec<AugmentOp> {
    let mut ops: Vec<_> = axis_shifts(dim, 0.6).into_iter().take(2).collect();
    for level in 0..6 {
        let factor = 0.04 * level as f64;
        ops.push(AugmentOp::fade(format!("fade:{factor:.2}"), factor));
    }
    ops
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub num_classes: usize,
    /// Evaluation points per class.
    pub per_class: usize,
    /// Training points per class.
    pub train_per_class: usize,
    pub dim: usize,
    /// Standard deviation of each blob.
    pub spread: f64,
    /// Radius of the ring the class centers sit on (first two coordinates).
    pub ring_radius: f64,
    /// Jitter applied to the training set, one copy per op.
    pub train_ops: Vec<AugmentOp>,
    /// Variant ops applied to every emitted sample.
    pub ops: Vec<AugmentOp>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_classes: 10,
            per_class: 500,
            train_per_class: 30,
            dim: DEFAULT_DIM,
            spread: 0.8,
            ring_radius: 4.0,
            train_ops: default_train_ops(DEFAULT_DIM),
            ops: default_ops(DEFAULT_DIM),
            epochs: 300,
            learning_rate: 4.0,
            seed: 42,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.per_class < 1 || self.train_per_class < 1 || self.dim < 1 {
            return bad("per_class, train_per_class and dim must be >= 1".into());
        }
        if !(self.spread > 0.0) || !self.spread.is_finite() {
            return bad(format!("spread must be positive, got {}", self.spread));
        }
        if !(self.ring_radius >= 0.0) || !self.ring_radius.is_finite() {
            return bad(format!("ring_radius must be non-negative, got {}", self.ring_radius));
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        for (i, ops) in [&self.ops, &self.train_ops].into_iter().enumerate() {
            let mut ids = std::collections::HashSet::new();
            for op in ops {
                if i == 0 && (op.op_id.is_empty() || !ids.insert(op.op_id.as_str())) {
                    return bad(format!("op ids must be unique and non-empty ({:?})", op.op_id));
                }
                match &op.kind {
                    AugmentKind::Shift { offset } if offset.len() != self.dim => {
                        return bad(format!("op {} offset has wrong dimension", op.op_id))
                    }
                    AugmentKind::Noise { sigma } if !(*sigma >= 0.0) => {
                        return bad(format!("op {} sigma must be non-negative", op.op_id))
                    }
                    AugmentKind::Fade { factor } if !factor.is_finite() => {
                        return bad(format!("op {} factor must be finite", op.op_id))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Center of class `k`: evenly spaced on the ring in the first two
    /// coordinates, zero elsewhere.
    pub fn center(&self, k: usize) -> Vec<f64> {
        let angle = 2.0 * PI * k as f64 / self.num_classes as f64;
        let mut c = vec![0.0; self.dim];
        c[0] = self.ring_radius * angle.cos();
        if self.dim > 1 {
            c[1] = self.ring_radius * angle.sin();
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub x: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub train: Vec<LabeledPoint>,
    pub eval: Vec<LabeledPoint>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_points(config: &WorldConfig, per_class: usize, stream: u64) -> Vec<LabeledPoint> {
    let mut rng = stream_rng(config.seed, stream);
    let centers: Vec<_> = (0..config.num_classes).map(|k| config.center(k)).collect();
    let mut out = Vec::with_capacity(per_class * config.num_classes);
    // interleave classes so any prefix is roughly balanced
    for _ in 0..per_class {
        for (label, c) in centers.iter().enumerate() {
            let x = c
                .iter()
                .map(|m| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    m + config.spread * e
                })
                .collect();
            out.push(LabeledPoint { x, label });
        }
    }
    out
}

pub fn generate_world(config: &WorldConfig) -> Result<World, SynthError> {
    config.validate()?;
    Ok(World {
        train: sample_points(config, config.train_per_class, TRAIN_STREAM),
        eval: sample_points(config, config.per_class, EVAL_STREAM),
    })
}

/// Linear softmax classifier. Parameters are stored flat: the `C x d` weight
/// matrix row by row, then the `C` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxClassifier {
    num_classes: usize,
    dim: usize,
    params: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

impl SoftmaxClassifier {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        SoftmaxClassifier {
            num_classes,
            dim,
            params: vec![0.0; num_classes * dim + num_classes],
        }
    }

    pub fn from_params(num_classes: usize, dim: usize, params: Vec<f64>) -> Self {
        assert_eq!(params.len(), num_classes * dim + num_classes);
        SoftmaxClassifier {
            num_classes,
            dim,
            params,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let (w, b) = self.params.split_at(self.num_classes * self.dim);
        (0..self.num_classes)
            .map(|k| {
                let row = &w[k * self.dim..(k + 1) * self.dim];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[k]
            })
            .collect()
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    /// Mean cross-entropy over the points and its gradient w.r.t. the flat
    /// parameter vector.
    pub fn loss_and_gradient(&self, points: &[LabeledPoint]) -> (f64, Vec<f64>) {
        let c = self.num_classes;
        let d = self.dim;
        let (w, b) = self.params.split_at(c * d);
        let mut grad = vec![0.0; self.params.len()];
        let mut logits = vec![0.0; c];
        let mut loss = 0.0;
        for pt in points {
            for k in 0..c {
                let row = &w[k * d..(k + 1) * d];
                logits[k] = row.iter().zip(&pt.x).map(|(a, x)| a * x).sum::<f64>() + b[k];
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let log_z = max + z.ln();
            loss += log_z - logits[pt.label];
            let (gw, gb) = grad.split_at_mut(c * d);
            for k in 0..c {
                let p = (logits[k] - log_z).exp();
                let delta = p - if k == pt.label { 1.0 } else { 0.0 };
                for (g, x) in gw[k * d..(k + 1) * d].iter_mut().zip(&pt.x) {
                    *g += delta * x;
                }
                gb[k] += delta;
            }
        }
        let n = points.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }

    pub fn accuracy(&self, points: &[LabeledPoint]) -> f64 {
        if points.is_empty() {
            return 0.0;
        }
        let correct = points
            .iter()
            .filter(|p| argmax(&self.logits(&p.x)) == p.label)
            .count();
        correct as f64 / points.len() as f64
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_learning_rate: f64,
    pub augmented_size: usize,
    /// Loss after every accepted step.
    #[serde(skip)]
    pub loss_history: Vec<f64>,
}

/// The training set plus one jittered copy per augmentation op.
pub fn augmented_training_set(train: &[LabeledPoint], config: &WorldConfig) -> Vec<LabeledPoint> {
    let mut rng = stream_rng(config.seed, TRAIN_AUGMENT_STREAM);
    let mut out = train.to_vec();
    for op in &config.train_ops {
        for p in train {
            out.push(LabeledPoint {
                x: op.apply(&p.x, &mut rng),
                label: p.label,
            });
        }
    }
    out
}

/// Full-batch gradient descent on cross-entropy over the augmented training
/// set, starting from zero weights. A step that raises the loss by more than
/// 1e-6 is discarded and the learning rate halved.
pub fn train_classifier(
    train: &[LabeledPoint],
    config: &WorldConfig,
) -> Result<(SoftmaxClassifier, TrainSummary), SynthError> {
    config.validate()?;
    let data = augmented_training_set(train, config);
    let mut model = SoftmaxClassifier::zeros(config.num_classes, config.dim);
    let (mut loss, mut grad) = model.loss_and_gradient(&data);
    let initial_loss = loss;
    let mut lr = config.learning_rate;
    let mut history = Vec::with_capacity(config.epochs);
    let mut epochs_run = 0;

    'epochs: for epoch in 0..config.epochs {
        loop {
            let candidate: Vec<f64> = model
                .params
                .iter()
                .zip(&grad)
                .map(|(p, g)| p - lr * g)
                .collect();
            let next = SoftmaxClassifier::from_params(config.num_classes, config.dim, candidate);
            let (next_loss, next_grad) = next.loss_and_gradient(&data);
            if next_loss.is_nan() {
                return Err(SynthError::DivergedTraining { epoch });
            }
            if next_loss <= loss + LOSS_SLACK {
                model = next;
                loss = next_loss;
                grad = next_grad;
                history.push(loss);
                epochs_run = epoch + 1;
                break;
            }
            lr *= 0.5;
            if lr < MIN_LEARNING_RATE {
                break 'epochs;
            }
        }
    }

    Ok((
        model,
        TrainSummary {
            epochs_run,
            initial_loss,
            final_loss: loss,
            final_learning_rate: lr,
            augmented_size: data.len(),
            loss_history: history,
        },
    ))
}

/// One record per point: the prediction for the point and for each op's
/// variant, with the label embedded. Sample ids are `{prefix}{index:06}`.
pub fn emit_records(
    model: &SoftmaxClassifier,
    points: &[LabeledPoint],
    ops: &[AugmentOp],
    seed: u64,
    prefix: &str,
) -> Result<Dataset, SynthError> {
    let records: Result<Vec<_>, RecordError> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = stream_rng(seed, EMIT_STREAM_BASE + i as u64);
            let variants = ops
                .iter()
                .map(|op| (op.op_id.clone(), model.predict_proba(&op.apply(&p.x, &mut rng))))
                .collect();
            PredictionRecord::new(
                format!("{prefix}{i:06}"),
                model.predict_proba(&p.x),
                variants,
                Some(p.label),
                None,
            )
        })
        .collect();
    Ok(Dataset::new(records?).expect("generated ids are unique"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorldStats {
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
    pub eval_failing_ratio: f64,
    pub eval_subtle_at_0_7: usize,
    pub eval_subtle_at_0_8: usize,
    pub eval_subtle_at_0_9: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorldManifest {
    pub spec_version: u32,
    pub config: WorldConfig,
    pub training: TrainSummary,
    pub stats: WorldStats,
    pub classifier: SoftmaxClassifier,
}

/// Generated world ready to be written out.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub train: Dataset,
    pub eval: Dataset,
    pub manifest: WorldManifest,
}

fn subtle_count(d: &Dataset, theta: f64) -> usize {
    let spec = RejectorSpec::new(theta).expect("valid theta");
    d.iter()
        .filter(|r| r.is_failing() == Some(true) && spec.passes(r.confidence()))
        .count()
}

pub fn build_world(config: &WorldConfig) -> Result<SyntheticWorld, SynthError> {
    let world = generate_world(config)?;
    let (model, training) = train_classifier(&world.train, config)?;
    let train = emit_records(&model, &world.train, &config.ops, config.seed, "t")?;
    let eval = emit_records(
        &model,
        &world.eval,
        &config.ops,
        config.seed.wrapping_add(1),
        "e",
    )?;
    let stats = WorldStats {
        train_accuracy: model.accuracy(&world.train),
        eval_accuracy: model.accuracy(&world.eval),
        eval_failing_ratio: eval.failing_count() as f64 / eval.len() as f64,
        eval_subtle_at_0_7: subtle_count(&eval, 0.7),
        eval_subtle_at_0_8: subtle_count(&eval, 0.8),
        eval_subtle_at_0_9: subtle_count(&eval, 0.9),
    };
    Ok(SyntheticWorld {
        train,
        eval,
        manifest: WorldManifest {
            spec_version: crate::evaluation::REPORT_VERSION,
            config: config.clone(),
            training,
            stats,
            classifier: model,
        },
    })
}
