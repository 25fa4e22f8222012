//! Class-weighted cross-entropy, Adam, the plateau learning-rate schedule,
//! and the epoch loop.

use std::borrow::Borrow;
use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agatston::class_names;
use crate::checkpoint::ModelCheckpoint;
use crate::data::{batch_iter, kfold_patients, split_counts, LabeledSlice, DEFAULT_SPLIT_FRACTIONS};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::layers::Mode;
use crate::metrics::{ConfusionMatrix, EvaluationReport};
use crate::model::{argmax, build_model, stream_rng, Model, ModelConfig, ParamGrads, NUM_CLASSES};
use crate::tensor::{Real, Tensor};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;
/// Minimum decrease in validation loss that counts as an improvement.
pub const PLATEAU_THRESHOLD: f64 = 1e-8;
/// Examples per parallel work unit inside a batch. Fixed so that gradient
/// summation order does not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub lr_min: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub class_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 15,
            batch_size: 32,
            lr_factor: 0.5,
            lr_patience: 2,
            lr_min: 1e-6,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            class_weights: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.learning_rate) {
            return bad(format!(
                "lr_min {} must be in (0, learning_rate {}]",
                self.lr_min, self.learning_rate
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!("lr_factor {} must be in (0, 1)", self.lr_factor));
        }
        if self.lr_patience == 0 {
            return bad("lr_patience must be at least 1".into());
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2) && self.adam_eps > 0.0) {
            return bad("Adam betas must be in [0, 1) and eps positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    /// Classes with no examples; their weight is 0.
    pub absent: Vec<usize>,
}

/// Balanced inverse-frequency weights `N / (K_present * n_c)`.
pub fn compute_class_weights(counts: &[usize]) -> Result<ClassWeights> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Data("all class counts are zero".into()));
    }
    let present = counts.iter().filter(|&&n| n > 0).count() as f64;
    let weights = counts
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { total as f64 / (present * n as f64) })
        .collect();
    let absent: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == 0).collect();
    if !absent.is_empty() {
        log::warn!("classes {absent:?} have no training examples; weight set to 0");
    }
    Ok(ClassWeights { weights, absent })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossEntropy<T> {
    pub loss: f64,
    /// Gradient of `loss / batch_size` with respect to the logits.
    pub logit_grad: Tensor<T>,
    /// The label's probability was below [`PROB_FLOOR`].
    pub clamped: bool,
}

/// `-w * ln p[label]` and its fused softmax gradient `w (p - onehot) / batch`.
pub fn weighted_cross_entropy<T: Real>(
    probs: &Tensor<T>,
    label: usize,
    weight: f64,
    batch_size: usize,
) -> Result<CrossEntropy<T>> {
    let p = probs.data();
    if label >= p.len() {
        return Err(Error::Data(format!("label {label} outside 0..{}", p.len())));
    }
    let p_label = p[label].to_f64_lossy();
    let clamped = p_label < PROB_FLOOR;
    let loss = -weight * p_label.max(PROB_FLOOR).ln();
    let scale = weight / batch_size as f64;
    let logit_grad = Tensor::from_fn(probs.shape(), |i| {
        let onehot = if i == label { 1.0 } else { 0.0 };
        T::from_f64_lossy(scale * (p[i].to_f64_lossy() - onehot))
    });
    Ok(CrossEntropy {
        loss,
        logit_grad,
        clamped,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&Tensor<T>], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// One bias-corrected Adam update. A non-finite gradient aborts before
    /// anything is modified.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(format!(
                "Adam state has {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::dim(format!(
                    "tensor {i}: param {:?}, grad {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::Numerical(format!("non-finite gradient in tensor {i}")));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let g = g.to_f64_lossy();
                let mi = b1 * m.to_f64_lossy() + (1.0 - b1) * g;
                let vi = b2 * v.to_f64_lossy() + (1.0 - b2) * g * g;
                *m = T::from_f64_lossy(mi);
                *v = T::from_f64_lossy(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *p = T::from_f64_lossy(p.to_f64_lossy() - update);
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau: after `patience` consecutive epochs without
/// improvement the rate is multiplied by `factor`, never going below `min_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub best_val_loss: f64,
    pub epochs_since_improvement: usize,
    pub current_lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            best_val_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            current_lr: lr,
            factor,
            patience,
            min_lr,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.learning_rate, cfg.lr_factor, cfg.lr_patience, cfg.lr_min)
    }

    /// Feeds one epoch's validation loss and returns the rate for the next epoch.
    pub fn update(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best_val_loss - PLATEAU_THRESHOLD {
            self.best_val_loss = val_loss;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.patience {
                self.current_lr = (self.current_lr * self.factor).max(self.min_lr);
                self.epochs_since_improvement = 0;
            }
        }
        self.current_lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Rate used during this epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub fn history_jsonl(history: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for record in history {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_atomic(path, history_jsonl(history)?.as_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<EpochRecord>,
    pub class_weights: ClassWeights,
    /// How many label probabilities hit [`PROB_FLOOR`].
    pub clamped_probabilities: usize,
}

fn patients<S: Borrow<LabeledSlice>>(set: &[S]) -> BTreeSet<&str> {
    set.iter().map(|s| s.borrow().patient_id.as_str()).collect()
}

/// Errors with [`Error::Leakage`] if the two sets share a patient.
pub fn check_patient_disjoint<S: Borrow<LabeledSlice>>(a: &[S], b: &[S]) -> Result<()> {
    let pa = patients(a);
    if let Some(shared) = patients(b).into_iter().find(|p| pa.contains(p)) {
        return Err(Error::Leakage(format!(
            "patient {shared} appears in both training and validation data"
        )));
    }
    Ok(())
}

struct ChunkResult {
    grads: ParamGrads<f32>,
    loss: f64,
    correct: usize,
    clamped: usize,
}

/// Per-example dropout stream, independent of batching and thread layout.
fn dropout_rng(seed: u64, epoch: usize, example: usize) -> rand_chacha::ChaCha8Rng {
    stream_rng(seed.wrapping_add(0x9e37_79b9_7f4a_7c15), ((epoch as u64) << 32) | example as u64)
}

/// Unweighted mean cross-entropy and accuracy in eval mode; also returns
/// the predicted class of every example.
pub fn evaluate_loss<S: Borrow<LabeledSlice> + Sync>(model: &Model<f32>, set: &[S]) -> Result<(f64, f64, Vec<usize>)> {
    let per: Vec<(f64, usize)> = set
        .par_iter()
        .map(|s| {
            let s = s.borrow();
            let probs = model.predict_slice(&s.image)?;
            let p = f64::from(probs.data()[s.label]).max(PROB_FLOOR);
            Ok((-p.ln(), argmax(probs.data())))
        })
        .collect::<Result<_>>()?;
    let n = set.len() as f64;
    let loss = per.iter().map(|(l, _)| l).sum::<f64>() / n;
    let preds: Vec<usize> = per.into_iter().map(|(_, p)| p).collect();
    let correct = preds.iter().zip(set).filter(|(p, s)| **p == (*s).borrow().label).count();
    Ok((loss, correct as f64 / n, preds))
}

/// Trains `model` in place for `cfg.epochs` epochs and returns the
/// final-epoch checkpoint with the per-epoch history.
pub fn train<S: Borrow<LabeledSlice> + Sync>(
    mut model: Model<f32>,
    train_set: &[S],
    val_set: &[S],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    check_patient_disjoint(train_set, val_set)?;
    let mut counts = vec![0usize; NUM_CLASSES];
    for s in train_set {
        let label = s.borrow().label;
        *counts
            .get_mut(label)
            .ok_or_else(|| Error::Data(format!("label {label} outside 0..{NUM_CLASSES}")))? += 1;
    }
    let class_weights = if cfg.class_weights {
        compute_class_weights(&counts)?
    } else {
        ClassWeights {
            weights: vec![1.0; NUM_CLASSES],
            absent: Vec::new(),
        }
    };
    let weights = &class_weights.weights;

    let mut adam = AdamState::new(&model.param_tensors(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut scheduler = PlateauScheduler::from_config(cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut clamped_total = 0;

    for epoch in 0..cfg.epochs {
        let lr = scheduler.current_lr;
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in batch_iter(train_set.len(), cfg.batch_size, cfg.seed, epoch as u64)? {
            let model_ref = &model;
            let chunks: Vec<ChunkResult> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut out = ChunkResult {
                        grads: model_ref.zero_grads(),
                        loss: 0.0,
                        correct: 0,
                        clamped: 0,
                    };
                    for &idx in chunk {
                        let s = train_set[idx].borrow();
                        let mut rng = dropout_rng(cfg.seed, epoch, idx);
                        let (probs, cache) = model_ref.forward(&s.image, Mode::Train, &mut rng)?;
                        let ce = weighted_cross_entropy(&probs, s.label, weights[s.label], batch.len())?;
                        model_ref.backward_from_logits(&cache, &ce.logit_grad, &mut out.grads)?;
                        out.loss += ce.loss;
                        out.correct += usize::from(argmax(probs.data()) == s.label);
                        out.clamped += usize::from(ce.clamped);
                    }
                    Ok(out)
                })
                .collect::<Result<_>>()?;
            let mut iter = chunks.into_iter();
            let mut total = iter.next().expect("batch is non-empty");
            for c in iter {
                total.grads.add_assign(&c.grads)?;
                total.loss += c.loss;
                total.correct += c.correct;
                total.clamped += c.clamped;
            }
            loss_sum += total.loss;
            correct += total.correct;
            clamped_total += total.clamped;
            adam.step(&mut model.param_tensors_mut(), &total.grads.tensors(), lr)?;
        }
        let (val_loss, val_acc, _) = evaluate_loss(&model, val_set)?;
        let n = train_set.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
        };
        log::info!(
            "epoch {} lr {:.2e} train_loss {:.4} train_acc {:.4} val_loss {:.4} val_acc {:.4}",
            record.epoch,
            record.lr,
            record.train_loss,
            record.train_acc,
            record.val_loss,
            record.val_acc
        );
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("validation loss {val_loss} at epoch {}", epoch + 1)));
        }
        history.push(record);
        scheduler.update(val_loss);
    }
    if clamped_total > 0 {
        log::warn!("{clamped_total} label probabilities clamped to {PROB_FLOOR}");
    }
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint::new(model, cfg.seed, cfg.epochs, scheduler.current_lr),
        history,
        class_weights,
        clamped_probabilities: clamped_total,
    })
}

/// Slice-level confusion matrix of `model` on `set`.
pub fn evaluate<S: Borrow<LabeledSlice> + Sync>(model: &Model<f32>, set: &[S]) -> Result<EvaluationReport> {
    if set.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let (_, _, preds) = evaluate_loss(model, set)?;
    let mut m = ConfusionMatrix::zeros(class_names());
    for (s, p) in set.iter().zip(preds) {
        m.record(s.borrow().label, p)?;
    }
    EvaluationReport::from_matrix(&m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub held_out: Vec<String>,
    pub validation: Vec<String>,
    pub report: EvaluationReport,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub pooled: EvaluationReport,
}

/// Patient-grouped k-fold cross-validation.
///
/// Each fold's held-out patients are the test set. The remaining patients
/// are split again by patient into training and validation (the validation
/// share matches the default split's ratio) so the plateau schedule never
/// sees test data.
pub fn run_cross_validation(
    slices: &[LabeledSlice],
    k: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<CrossValidation> {
    let ids: Vec<String> = patients(slices).into_iter().map(str::to_string).collect();
    let folds = kfold_patients(&ids, k, cfg.seed)?;
    let val_share = DEFAULT_SPLIT_FRACTIONS[1] / (DEFAULT_SPLIT_FRACTIONS[0] + DEFAULT_SPLIT_FRACTIONS[1]);
    let mut results = Vec::with_capacity(k);
    let mut pooled = ConfusionMatrix::zeros(class_names());
    for (f, held_out) in folds.iter().enumerate() {
        let rest: Vec<&String> = folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != f)
            .flat_map(|(_, fold)| fold)
            .collect();
        if rest.len() < 2 {
            return Err(Error::Config(format!(
                "fold {f} leaves {} training patients; need at least 2",
                rest.len()
            )));
        }
        let [_, n_val, _] = split_counts(rest.len(), [1.0 - val_share, val_share, 0.0])?;
        let n_val = n_val.clamp(1, rest.len() - 1);
        // folds are already a seeded shuffle, so take validation from the tail
        let validation: Vec<String> = rest[rest.len() - n_val..].iter().map(|s| s.to_string()).collect();
        let pick = |ids: &[String]| -> Vec<&LabeledSlice> {
            let set: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
            slices.iter().filter(|s| set.contains(s.patient_id.as_str())).collect()
        };
        let train_ids: Vec<String> = rest[..rest.len() - n_val].iter().map(|s| s.to_string()).collect();
        let (tr, va, te) = (pick(&train_ids), pick(&validation), pick(held_out));
        log::info!(
            "fold {}/{k}: {} train, {} validation, {} test slices",
            f + 1,
            tr.len(),
            va.len(),
            te.len()
        );
        let fold_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(f as u64),
            ..cfg.clone()
        };
        let model = build_model::<f32>(model_cfg, fold_cfg.seed)?;
        let outcome = train(model, &tr, &va, &fold_cfg)?;
        let report = evaluate(&outcome.checkpoint.model, &te)?;
        pooled.merge(&report.matrix()?)?;
        results.push(FoldResult {
            fold: f,
            held_out: held_out.clone(),
            validation,
            report,
            history: outcome.history,
        });
    }
    Ok(CrossValidation {
        folds: results,
        pooled: EvaluationReport::from_matrix(&pooled)?,
    })
}
