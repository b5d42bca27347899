//! Optimization and training drivers: SGD with momentum, truncated-horizon
//! schedules, the teacher and future-state-predicting training loops, the
//! encoder fine-tuning loop, and a finite-difference gradient checker.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    extract_features, single_frame_loss_and_grads, subvideo_loss_and_grads, weighted_max_pool,
    EncoderModel, FinetuneMode, SampleConfig, SampleSet,
};
use crate::error::{Error, Result};
use crate::losses::{
    average_ce, fsp_total, future_pred_loss, linear_weighted_ce, ClassLossKind, FutureLossKind,
    LossSelection,
};
use crate::recurrent::{
    backward_sequence, forward_sequence, record_teacher_states, RecurrentModel,
};
use crate::rng::indexed_substream;
use crate::synth::{Dataset, Split};
use crate::tensor::{softmax, ParamTensors, Vector};

/// Plain SGD with classical momentum and decoupled-from-biases L2 decay.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        let cfg = SgdConfig { learning_rate, momentum, weight_decay };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Per-tensor velocity buffers, in the same order as `ParamTensors::tensors`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn for_params<P: ParamTensors + ?Sized>(params: &P) -> Self {
        SgdState {
            velocity: params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn velocity(&self, tensor_index: usize) -> &[f64] {
        &self.velocity[tensor_index]
    }
}

/// One SGD step: g <- g + wd*theta (decayed tensors only), v <- mu*v + g,
/// theta <- theta - lr*v. Gradients are read-only; `state` carries momentum.
pub fn sgd_update<P, G>(params: &mut P, grads: &G, state: &mut SgdState, cfg: &SgdConfig) -> Result<()>
where
    P: ParamTensors + ?Sized,
    G: ParamTensors + ?Sized,
{
    cfg.validate()?;
    let grad_tensors = grads.tensors();
    let mut param_tensors = params.tensors_mut();
    if grad_tensors.len() != param_tensors.len() || state.velocity.len() != param_tensors.len() {
        return Err(Error::DimensionMismatch(format!(
            "optimizer saw {} parameter tensors, {} gradient tensors, {} velocity buffers",
            param_tensors.len(),
            grad_tensors.len(),
            state.velocity.len()
        )));
    }
    for ((p, g), v) in param_tensors.iter_mut().zip(&grad_tensors).zip(&mut state.velocity) {
        if p.name != g.name || p.data.len() != g.data.len() || p.data.len() != v.len() {
            return Err(Error::DimensionMismatch(format!(
                "optimizer tensor mismatch: params {}[{}] vs grads {}[{}] vs velocity [{}]",
                p.name,
                p.data.len(),
                g.name,
                g.data.len(),
                v.len()
            )));
        }
        for ((theta, &grad), vel) in p.data.iter_mut().zip(g.data).zip(v.iter_mut()) {
            let mut effective = grad;
            if p.decay {
                effective += cfg.weight_decay * *theta;
            }
            *vel = cfg.momentum * *vel + effective;
            *theta -= cfg.learning_rate * *vel;
        }
    }
    Ok(())
}

/// How far ahead of the training horizon the prediction target sits: either a
/// fraction of each sequence's length or a fixed step count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaSpec {
    Fraction(f64),
    FixedSteps(usize),
}

impl DeltaSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DeltaSpec::Fraction(phi) => {
                if !(phi > 0.0 && phi < 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "fraction offset must lie in (0, 1), got {phi}"
                    )));
                }
            }
            DeltaSpec::FixedSteps(k) => {
                if k == 0 {
                    return Err(Error::InvalidArgument(
                        "fixed step offset must be at least 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Training horizon T' for a sequence of length `seq_len`: floor((1-phi)*T)
/// for fractional offsets, T-k for fixed ones. `None` means the sequence is
/// too short to train on (T' < 1) and must be skipped.
pub fn truncation_point(delta: &DeltaSpec, seq_len: usize) -> Result<Option<usize>> {
    delta.validate()?;
    if seq_len == 0 {
        return Err(Error::InvalidArgument("sequence length must be at least 1".into()));
    }
    let horizon = match *delta {
        DeltaSpec::Fraction(phi) => ((1.0 - phi) * seq_len as f64).floor() as usize,
        DeltaSpec::FixedSteps(k) => seq_len.saturating_sub(k),
    };
    Ok(if horizon >= 1 { Some(horizon) } else { None })
}

/// One training run's hyperparameters. `delta` and `loss.future` only
/// matter for future-state training; classifier runs ignore them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Early stopping: give up after this many epochs without a new best
    /// validation accuracy. Set >= epochs to disable.
    pub patience: usize,
    /// Snapshot the model every k epochs into the outcome (0 = never).
    pub checkpoint_every: usize,
    pub loss: LossSelection,
    pub delta: DeltaSpec,
    pub seed: u64,
}

impl TrainConfig {
    /// Recurrent-classifier defaults: lr 1e-3, momentum 0.9, decay 1e-3.
    pub fn lstm_defaults(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-3,
            epochs: 150,
            patience: 25,
            checkpoint_every: 0,
            loss: LossSelection::classification_only(ClassLossKind::Average),
            delta: DeltaSpec::Fraction(0.2),
            seed,
        }
    }

    /// Future-state-predicting student defaults: the classifier recipe plus
    /// a smooth-L1 future term at lambda 10, horizon cut at 20%.
    pub fn fsp_defaults(seed: u64) -> Self {
        TrainConfig {
            epochs: 100,
            loss: LossSelection {
                classification: ClassLossKind::Average,
                future: Some(FutureLossKind::SmoothL1),
                lambda: 10.0,
            },
            ..TrainConfig::lstm_defaults(seed)
        }
    }

    pub fn sgd(&self) -> Result<SgdConfig> {
        SgdConfig::new(self.learning_rate, self.momentum, self.weight_decay)
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd()?;
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        self.loss.validate()?;
        self.delta.validate()
    }
}

/// One row of a training log; serialized as CSV by [`write_training_log`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy_final_step: f64,
}

/// CSV with the fixed header `epoch,split,loss,accuracy_final_step`.
pub fn write_training_log(rows: &[EpochLog], path: &Path) -> Result<()> {
    let mut text = String::from("epoch,split,loss,accuracy_final_step\n");
    for r in rows {
        text.push_str(&format!("{},{},{},{}\n", r.epoch, r.split, r.loss, r.accuracy_final_step));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The best-validation checkpoint, not the last epoch's parameters.
    pub model: RecurrentModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub epochs_run: usize,
    /// (epoch, snapshot) pairs when `checkpoint_every` > 0.
    pub periodic: Vec<(usize, RecurrentModel)>,
}

/// Per-sequence truncation bookkeeping from a future-state training run,
/// in training-split order. `nonzero_grad_steps` counts the steps whose
/// loss gradients were not identically zero, measured from the actual
/// gradient vectors of the first epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruncationStat {
    pub seq_len: usize,
    pub horizon: Option<usize>,
    pub nonzero_grad_steps: usize,
}

#[derive(Debug, Clone)]
pub struct FspOutcome {
    pub model: RecurrentModel,
    pub log: Vec<EpochLog>,
    pub truncation: Vec<TruncationStat>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub epochs_run: usize,
    pub periodic: Vec<(usize, RecurrentModel)>,
}

fn split_features(
    dataset: &Dataset,
    encoder: &EncoderModel,
    split: Split,
) -> Result<(Vec<Vec<Vector>>, Vec<usize>)> {
    let idx = dataset.split_indices(split);
    if idx.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset has no {split} sequences")));
    }
    let mut features = Vec::with_capacity(idx.len());
    let mut labels = Vec::with_capacity(idx.len());
    for i in idx {
        features.push(extract_features(encoder, &dataset.sequences[i])?);
        labels.push(dataset.sequences[i].label);
    }
    Ok((features, labels))
}

fn classification_loss(
    loss: &LossSelection,
    probs: &[Vector],
    label: usize,
    steps: usize,
    seq_len: usize,
) -> Result<(f64, Vec<Vector>)> {
    match loss.classification {
        ClassLossKind::Average => average_ce(probs, label, steps),
        ClassLossKind::LinearWeighted => linear_weighted_ce(probs, label, steps, seq_len),
    }
}

fn final_step_accuracy(model: &RecurrentModel, features: &[Vec<Vector>], labels: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    for (feats, &label) in features.iter().zip(labels) {
        let trace = forward_sequence(model, feats)?;
        if trace.probs[feats.len() - 1].argmax() == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / features.len() as f64)
}

fn epoch_order(count: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut indexed_substream(seed, "epoch", epoch as u64));
    order
}

/// Shared classifier loop: one sequence per optimization step, seeded
/// shuffle each epoch, early stopping on validation accuracy. `horizon`
/// maps a sequence length to the trained step range (None = skip).
fn run_classifier_loop(
    mut model: RecurrentModel,
    train: (&[Vec<Vector>], &[usize]),
    val: (&[Vec<Vector>], &[usize]),
    cfg: &TrainConfig,
    horizon: &dyn Fn(usize) -> Result<Option<usize>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sgd = cfg.sgd()?;
    let mut state = SgdState::for_params(&model);
    let mut log = Vec::new();
    let mut periodic = Vec::new();
    let mut best = model.clone();
    let mut best_epoch = 0usize;
    let mut best_acc = f64::NEG_INFINITY;
    let mut epochs_run = 0usize;

    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        let mut loss_sum = 0.0;
        let mut trained = 0usize;
        let mut correct = 0usize;
        for i in epoch_order(train.0.len(), cfg.seed, epoch) {
            let feats = &train.0[i];
            let label = train.1[i];
            let seq_len = feats.len();
            let Some(steps) = horizon(seq_len)? else { continue };
            let trace = forward_sequence(&model, feats)?;
            let (loss, d_logits) =
                classification_loss(&cfg.loss, &trace.probs, label, steps, seq_len)?;
            let grads = backward_sequence(&model, feats, &d_logits, &[])?;
            sgd_update(&mut model, &grads, &mut state, &sgd)?;
            loss_sum += loss;
            trained += 1;
            if trace.probs[seq_len - 1].argmax() == label {
                correct += 1;
            }
        }
        if trained == 0 {
            return Err(Error::InvalidArgument(
                "every training sequence was skipped by the truncation rule".into(),
            ));
        }
        log.push(EpochLog {
            epoch,
            split: Split::Train,
            loss: loss_sum / trained as f64,
            accuracy_final_step: correct as f64 / trained as f64,
        });

        let mut val_loss_sum = 0.0;
        let mut val_counted = 0usize;
        for (feats, &label) in val.0.iter().zip(val.1) {
            let seq_len = feats.len();
            let Some(steps) = horizon(seq_len)? else { continue };
            let trace = forward_sequence(&model, feats)?;
            val_loss_sum += classification_loss(&cfg.loss, &trace.probs, label, steps, seq_len)?.0;
            val_counted += 1;
        }
        let val_acc = final_step_accuracy(&model, val.0, val.1)?;
        log.push(EpochLog {
            epoch,
            split: Split::Val,
            loss: if val_counted > 0 { val_loss_sum / val_counted as f64 } else { f64::NAN },
            accuracy_final_step: val_acc,
        });

        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            periodic.push((epoch, model.clone()));
        }
        if val_acc > best_acc {
            best_acc = val_acc;
            best_epoch = epoch;
            best = model.clone();
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        log,
        best_epoch,
        best_val_accuracy: best_acc,
        epochs_run,
        periodic,
    })
}

/// Train a recurrent classifier on frozen-encoder features: full-sequence
/// classification loss, one sequence per step. Returns the best-validation
/// checkpoint plus the per-epoch log.
pub fn train_teacher(
    dataset: &Dataset,
    encoder: &EncoderModel,
    hidden_dim: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let (train_feats, train_labels) = split_features(dataset, encoder, Split::Train)?;
    let (val_feats, val_labels) = split_features(dataset, encoder, Split::Val)?;
    let model = RecurrentModel::new(
        encoder.embedding_dim,
        hidden_dim,
        dataset.num_classes(),
        false,
        cfg.seed,
    )?;
    run_classifier_loop(
        model,
        (&train_feats, &train_labels),
        (&val_feats, &val_labels),
        cfg,
        &|seq_len| Ok(Some(seq_len)),
    )
}

/// Train a student that classifies and predicts the frozen teacher's hidden
/// state `T - T'` steps ahead. Both loss terms run over [1, T']; sequences
/// whose horizon vanishes are skipped and recorded as such.
pub fn train_fsp(
    dataset: &Dataset,
    encoder: &EncoderModel,
    teacher: &RecurrentModel,
    cfg: &TrainConfig,
) -> Result<FspOutcome> {
    cfg.validate()?;
    if cfg.loss.future.is_none() {
        return Err(Error::InvalidArgument(
            "future-state training needs a future loss selected".into(),
        ));
    }
    if teacher.has_future_head() {
        return Err(Error::InvalidArgument(
            "the teacher must be a pure classifier (no future head)".into(),
        ));
    }
    if teacher.input_dim != encoder.embedding_dim {
        return Err(Error::DimensionMismatch(format!(
            "teacher expects {}-dim features, encoder embeds into {}",
            teacher.input_dim, encoder.embedding_dim
        )));
    }
    let (train_feats, train_labels) = split_features(dataset, encoder, Split::Train)?;
    let (val_feats, val_labels) = split_features(dataset, encoder, Split::Val)?;

    // The teacher is read-only: record its state trajectories once.
    let teacher_train: Vec<Vec<Vector>> = train_feats
        .iter()
        .map(|f| record_teacher_states(teacher, f))
        .collect::<Result<_>>()?;
    let teacher_val: Vec<Vec<Vector>> = val_feats
        .iter()
        .map(|f| record_teacher_states(teacher, f))
        .collect::<Result<_>>()?;

    let mut model = RecurrentModel::new(
        encoder.embedding_dim,
        teacher.hidden_dim,
        teacher.num_classes,
        true,
        cfg.seed,
    )?;
    let sgd = cfg.sgd()?;
    let mut state = SgdState::for_params(&model);
    let mut log = Vec::new();
    let mut periodic = Vec::new();
    let mut truncation: Vec<Option<TruncationStat>> = vec![None; train_feats.len()];
    let mut best = model.clone();
    let mut best_epoch = 0usize;
    let mut best_acc = f64::NEG_INFINITY;
    let mut epochs_run = 0usize;

    // Loss, horizon, and final-step prediction for one sequence (None when
    // the truncation rule skips it).
    let fsp_for = |model: &RecurrentModel,
                   feats: &[Vector],
                   label: usize,
                   teacher_h: &[Vector]|
     -> Result<Option<(crate::losses::FspLoss, usize, usize)>> {
        let seq_len = feats.len();
        let Some(steps) = truncation_point(&cfg.delta, seq_len)? else {
            return Ok(None);
        };
        let offset = seq_len - steps;
        let targets: Vec<Vector> =
            (0..steps).map(|t| teacher_h[t + offset].clone()).collect();
        let trace = forward_sequence(model, feats)?;
        let future_pred = trace
            .future_pred
            .as_ref()
            .expect("student models always carry a future head");
        let out =
            fsp_total(&cfg.loss, &trace.probs, label, future_pred, &targets, steps, seq_len)?;
        Ok(Some((out, steps, trace.probs[seq_len - 1].argmax())))
    };

    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        let mut loss_sum = 0.0;
        let mut trained = 0usize;
        let mut correct = 0usize;
        for i in epoch_order(train_feats.len(), cfg.seed, epoch) {
            let feats = &train_feats[i];
            let label = train_labels[i];
            let seq_len = feats.len();
            let Some((out, steps, predicted)) = fsp_for(&model, feats, label, &teacher_train[i])?
            else {
                if truncation[i].is_none() {
                    truncation[i] =
                        Some(TruncationStat { seq_len, horizon: None, nonzero_grad_steps: 0 });
                }
                continue;
            };
            if truncation[i].is_none() {
                let nonzero = |vectors: &[Vector], t: usize| {
                    vectors.get(t).is_some_and(|v| v.iter().any(|&x| x != 0.0))
                };
                let count = (0..seq_len)
                    .filter(|&t| nonzero(&out.d_logits, t) || nonzero(&out.d_future, t))
                    .count();
                truncation[i] = Some(TruncationStat {
                    seq_len,
                    horizon: Some(steps),
                    nonzero_grad_steps: count,
                });
            }
            let grads = backward_sequence(&model, feats, &out.d_logits, &out.d_future)?;
            sgd_update(&mut model, &grads, &mut state, &sgd)?;
            loss_sum += out.total;
            trained += 1;
            if predicted == label {
                correct += 1;
            }
        }
        if trained == 0 {
            return Err(Error::InvalidArgument(
                "every training sequence was skipped by the truncation rule".into(),
            ));
        }
        log.push(EpochLog {
            epoch,
            split: Split::Train,
            loss: loss_sum / trained as f64,
            accuracy_final_step: correct as f64 / trained as f64,
        });

        let mut val_loss_sum = 0.0;
        let mut val_counted = 0usize;
        for ((feats, &label), teacher_h) in val_feats.iter().zip(&val_labels).zip(&teacher_val) {
            if let Some((out, _, _)) = fsp_for(&model, feats, label, teacher_h)? {
                val_loss_sum += out.total;
                val_counted += 1;
            }
        }
        let val_acc = final_step_accuracy(&model, &val_feats, &val_labels)?;
        log.push(EpochLog {
            epoch,
            split: Split::Val,
            loss: if val_counted > 0 { val_loss_sum / val_counted as f64 } else { f64::NAN },
            accuracy_final_step: val_acc,
        });

        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            periodic.push((epoch, model.clone()));
        }
        if val_acc > best_acc {
            best_acc = val_acc;
            best_epoch = epoch;
            best = model.clone();
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    Ok(FspOutcome {
        model: best,
        log,
        truncation: truncation.into_iter().flatten().collect(),
        best_epoch,
        best_val_accuracy: best_acc,
        epochs_run,
        periodic,
    })
}

/// Mean per-coordinate squared error between a student's future predictions
/// and the teacher's realized states over the trained range, averaged per
/// sequence and then across sequences. Skipped sequences are excluded.
pub fn mean_future_prediction_error(
    student: &RecurrentModel,
    teacher: &RecurrentModel,
    features: &[Vec<Vector>],
    delta: &DeltaSpec,
) -> Result<f64> {
    if !student.has_future_head() {
        return Err(Error::InvalidArgument("model has no future head to evaluate".into()));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for feats in features {
        let seq_len = feats.len();
        let Some(steps) = truncation_point(delta, seq_len)? else { continue };
        let offset = seq_len - steps;
        let teacher_h = record_teacher_states(teacher, feats)?;
        let trace = forward_sequence(student, feats)?;
        let preds = trace.future_pred.as_ref().expect("future head checked above");
        let mut seq_err = 0.0;
        for t in 0..steps {
            seq_err += future_pred_loss(FutureLossKind::L2, &preds[t], &teacher_h[t + offset])?.0;
        }
        total += seq_err / steps as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::InvalidArgument(
            "every sequence was skipped by the truncation rule".into(),
        ));
    }
    Ok(total / counted as f64)
}

/// Encoder fine-tuning hyperparameters. Sub-video defaults per the training
/// recipe: lr 1e-5, momentum 0.9, weight decay 1e-4, dropout 0.5.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub embedding_dim: usize,
    pub dropout_prob: f64,
    pub sample: SampleConfig,
    pub seed: u64,
}

impl EncoderTrainConfig {
    pub fn subvideo_defaults(seed: u64) -> Self {
        EncoderTrainConfig {
            learning_rate: 1e-5,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 25,
            embedding_dim: 64,
            dropout_prob: 0.5,
            sample: SampleConfig::default(),
            seed,
        }
    }

    pub fn sgd(&self) -> Result<SgdConfig> {
        SgdConfig::new(self.learning_rate, self.momentum, self.weight_decay)
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd()?;
        if self.epochs == 0 || self.embedding_dim == 0 {
            return Err(Error::InvalidArgument(
                "encoder training needs epochs >= 1 and embedding_dim >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::InvalidArgument(format!(
                "dropout_prob must lie in [0, 1), got {}",
                self.dropout_prob
            )));
        }
        self.sample.validate()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutcome {
    pub model: EncoderModel,
    pub log: Vec<EpochLog>,
}

/// Deterministic encoder validation: dropout off; sub-video modes classify
/// the pooled embedding of every step, single-frame mode averages per-frame
/// predictions.
fn encoder_validation(
    model: &EncoderModel,
    dataset: &Dataset,
    mode: FinetuneMode,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    let val = dataset.split_sequences(Split::Val);
    for seq in &val {
        match mode {
            FinetuneMode::SingleFrame => {
                let mut seq_loss = 0.0;
                let mut seq_correct = 0usize;
                for frame in &seq.frames {
                    let (loss, _) = single_frame_loss_and_grads(model, frame, seq.label, None)?;
                    seq_loss += loss;
                    let probs = frame_probs(model, frame)?;
                    if probs.argmax() == seq.label {
                        seq_correct += 1;
                    }
                }
                loss_sum += seq_loss / seq.frames.len() as f64;
                acc_sum += seq_correct as f64 / seq.frames.len() as f64;
            }
            FinetuneMode::UnweightedSubvideo | FinetuneMode::WeightedSubvideo => {
                let weights_on = mode == FinetuneMode::WeightedSubvideo;
                let sample = SampleSet::full(seq.frames.len())?;
                let (loss, _) = subvideo_loss_and_grads(model, seq, &sample, weights_on, None)?;
                loss_sum += loss;
                let embedded: Vec<(usize, Vector)> = sample
                    .indices()
                    .iter()
                    .map(|&t| Ok((t, model.encode(&seq.frames[t - 1])?)))
                    .collect::<Result<_>>()?;
                let pooled = weighted_max_pool(&embedded, seq.frames.len(), weights_on)?;
                let logits = crate::tensor::affine(
                    &model.params.cls_w,
                    &pooled.values,
                    &model.params.cls_b,
                )?;
                if softmax(logits.as_slice())?.argmax() == seq.label {
                    acc_sum += 1.0;
                }
            }
        }
    }
    Ok((loss_sum / val.len() as f64, acc_sum / val.len() as f64))
}

fn frame_probs(model: &EncoderModel, frame: &Vector) -> Result<Vector> {
    let e = model.encode(frame)?;
    let logits = crate::tensor::affine(&model.params.cls_w, &e, &model.params.cls_b)?;
    softmax(logits.as_slice())
}

/// Fine-tune a fresh encoder on the training split: fixed epoch count, one
/// sequence per step, fresh frame sample (and dropout masks) per step.
pub fn finetune_encoder(
    dataset: &Dataset,
    mode: FinetuneMode,
    cfg: &EncoderTrainConfig,
) -> Result<EncoderOutcome> {
    cfg.validate()?;
    let train_idx = dataset.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument("dataset has no train sequences".into()));
    }
    if dataset.split_indices(Split::Val).is_empty() {
        return Err(Error::InvalidArgument("dataset has no val sequences".into()));
    }
    let mut model = EncoderModel::new(
        dataset.spec.feature_dim,
        cfg.embedding_dim,
        dataset.num_classes(),
        cfg.dropout_prob,
        cfg.seed,
    )?;
    let sgd = cfg.sgd()?;
    let mut state = SgdState::for_params(&model);
    let mut log = Vec::new();
    for epoch in 1..=cfg.epochs {
        // One substream per epoch covers the shuffle, the frame draws, and
        // the dropout masks, in that order.
        let mut rng = indexed_substream(cfg.seed, "encoder.epoch", epoch as u64);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for i in order {
            loss_sum += crate::encoder::finetune_step(
                &mut model,
                &dataset.sequences[i],
                mode,
                &cfg.sample,
                &sgd,
                &mut state,
                &mut rng,
            )?;
        }
        log.push(EpochLog {
            epoch,
            split: Split::Train,
            loss: loss_sum / train_idx.len() as f64,
            accuracy_final_step: f64::NAN,
        });
        let (val_loss, val_acc) = encoder_validation(&model, dataset, mode)?;
        log.push(EpochLog {
            epoch,
            split: Split::Val,
            loss: val_loss,
            accuracy_final_step: val_acc,
        });
    }
    Ok(EncoderOutcome { model, log })
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// Finite-difference comparison for one parameter tensor.
#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    /// ||g_a - g_n|| / max(||g_a||, ||g_n||, 1e-8) for the whole tensor —
    /// the pass/fail metric.
    pub rel_err: f64,
    /// Worst per-component |ga-gn| / max(|ga|,|gn|,1e-8); diagnostic only.
    /// Components where both magnitudes are <= 1e-8 count as exact by
    /// convention. At step 1e-5 in f64, components below ~2e-7 sit inside the
    /// rounding noise of the loss difference, so this number can be large on
    /// a correct gradient; the tensor norm above is immune to that.
    pub worst_component_rel: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    /// Worst tensor-level `rel_err` across the whole report.
    pub worst: f64,
}

impl GradCheckReport {
    pub fn passes(&self) -> bool {
        self.worst < GRAD_CHECK_TOLERANCE
    }
}

/// Central-difference check of `analytic_grads` against the loss landscape:
/// each parameter is displaced by ±1e-5 in turn and restored bit-exactly.
/// The loss closure must be deterministic (no dropout, no RNG).
pub fn gradient_check<P, G, F>(params: &mut P, analytic_grads: &G, mut loss: F) -> Result<GradCheckReport>
where
    P: ParamTensors + ?Sized,
    G: ParamTensors + ?Sized,
    F: FnMut(&P) -> Result<f64>,
{
    let analytic: Vec<(String, Vec<f64>)> = analytic_grads
        .tensors()
        .iter()
        .map(|t| (t.name.to_string(), t.data.to_vec()))
        .collect();
    let shapes: Vec<(String, usize)> = params
        .tensors()
        .iter()
        .map(|t| (t.name.to_string(), t.data.len()))
        .collect();
    if shapes.len() != analytic.len()
        || shapes
            .iter()
            .zip(&analytic)
            .any(|((pn, pl), (gn, gd))| pn != gn || *pl != gd.len())
    {
        return Err(Error::DimensionMismatch(
            "analytic gradients do not mirror the parameter tensors".into(),
        ));
    }

    let mut tensors = Vec::with_capacity(shapes.len());
    let mut worst: f64 = 0.0;
    for (tensor_index, (name, len)) in shapes.iter().enumerate() {
        let mut diff_sq = 0.0;
        let mut analytic_sq = 0.0;
        let mut numeric_sq = 0.0;
        let mut worst_component: f64 = 0.0;
        for element in 0..*len {
            let original = params.tensors()[tensor_index].data[element];
            params.tensors_mut()[tensor_index].data[element] = original + GRAD_CHECK_STEP;
            let loss_plus = loss(params)?;
            params.tensors_mut()[tensor_index].data[element] = original - GRAD_CHECK_STEP;
            let loss_minus = loss(params)?;
            params.tensors_mut()[tensor_index].data[element] = original;

            let g_n = (loss_plus - loss_minus) / (2.0 * GRAD_CHECK_STEP);
            let g_a = analytic[tensor_index].1[element];
            diff_sq += (g_a - g_n) * (g_a - g_n);
            analytic_sq += g_a * g_a;
            numeric_sq += g_n * g_n;
            let component_rel = if g_a.abs() <= GRAD_CHECK_FLOOR && g_n.abs() <= GRAD_CHECK_FLOOR {
                0.0
            } else {
                (g_a - g_n).abs() / g_a.abs().max(g_n.abs()).max(GRAD_CHECK_FLOOR)
            };
            worst_component = worst_component.max(component_rel);
        }
        let analytic_norm = analytic_sq.sqrt();
        let numeric_norm = numeric_sq.sqrt();
        let rel_err = diff_sq.sqrt() / analytic_norm.max(numeric_norm).max(GRAD_CHECK_FLOOR);
        worst = worst.max(rel_err);
        tensors.push(TensorCheck {
            name: name.clone(),
            rel_err,
            worst_component_rel: worst_component,
            analytic_norm,
            numeric_norm,
        });
    }
    Ok(GradCheckReport { tensors, worst })
}
