//! Accuracy as a function of elapsed steps.
//!
//! A trained classifier is probed at a fixed grid of checkpoints: after
//! consuming steps `1..c` of each test sequence, its running prediction is
//! compared against the true label. The report carries the accuracy curve,
//! one confusion matrix per checkpoint, per-class recall/precision, and a
//! separate "full video" accuracy taken at each sequence's own final step.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{extract_features, EncoderModel};
use crate::error::{Error, Result};
use crate::recurrent::{forward_sequence, RecurrentModel};
use crate::synth::FrameSequence;

/// Environment variable capping the number of evaluation worker threads.
pub const THREADS_ENV: &str = "EARLYREC_THREADS";

/// Per-class ratios derived from the per-checkpoint confusion matrices.
///
/// Outer index is the checkpoint, inner index the class. `None` marks an
/// undefined ratio: a recall with no test sequences of that class, or a
/// precision for a class the model never predicted at that checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassMetrics {
    /// Diagonal over row sum: of the sequences truly in this class, the
    /// fraction predicted correctly.
    pub recall: Vec<Vec<Option<f64>>>,
    /// Diagonal over column sum: of the predictions naming this class, the
    /// fraction that were right.
    pub precision: Vec<Vec<Option<f64>>>,
}

/// Accuracy measured at each sequence's own final step.
///
/// Sequences have different lengths, so these numbers do not correspond to
/// any shared amount of elapsed time; `time_aligned` stays `false` to keep
/// that visible in serialized reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullVideoAccuracy {
    pub per_class: Vec<Option<f64>>,
    pub overall: f64,
    pub time_aligned: bool,
}

/// Everything `evaluate` measures, in serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Elapsed-step values the model was probed at, strictly increasing.
    pub checkpoints: Vec<usize>,
    /// Fraction of test sequences classified correctly at each checkpoint.
    #[serde(rename = "accuracy")]
    pub accuracy_curve: Vec<f64>,
    /// One `N x N` count matrix per checkpoint; rows index the true class,
    /// columns the predicted class.
    pub confusion: Vec<Vec<Vec<usize>>>,
    pub per_class: PerClassMetrics,
    pub full_video: FullVideoAccuracy,
}

/// Default probe grid: seven evenly spaced checkpoints ending at the
/// shortest test sequence, deduplicated when the range is too small to
/// support seven distinct steps.
pub fn default_checkpoints(shortest: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = (1..=7)
        .map(|i| (((i * shortest) as f64 / 7.0).round() as usize).max(1))
        .collect();
    grid.dedup();
    if shortest == 0 {
        grid.clear();
    }
    grid
}

/// Result of probing one sequence: the prediction at every checkpoint plus
/// the prediction at the sequence's own final step.
#[derive(Debug, Clone, PartialEq)]
struct SeqEval {
    label: usize,
    checkpoint_preds: Vec<usize>,
    final_pred: usize,
}

fn eval_one(
    model: &RecurrentModel,
    encoder: &EncoderModel,
    seq: &FrameSequence,
    checkpoints: &[usize],
) -> Result<SeqEval> {
    let feats = extract_features(encoder, seq)?;
    let trace = forward_sequence(model, &feats)?;
    // probs[c-1] depends only on steps 1..c, so one full forward pass
    // yields every checkpoint's prediction.
    let checkpoint_preds = checkpoints.iter().map(|&c| trace.probs[c - 1].argmax()).collect();
    let final_pred = trace.probs.last().expect("sequences are non-empty").argmax();
    Ok(SeqEval { label: seq.label, checkpoint_preds, final_pred })
}

fn thread_cap(raw: Option<&str>) -> Result<Option<usize>> {
    let Some(raw) = raw else { return Ok(None) };
    match raw.trim().parse::<usize>() {
        Ok(n) if n >= 1 => Ok(Some(n)),
        _ => Err(Error::InvalidArgument(format!(
            "{THREADS_ENV} must be a positive integer, got {raw:?}"
        ))),
    }
}

fn worker_count(jobs: usize) -> Result<usize> {
    let hardware = std::thread::available_parallelism().map(usize::from).unwrap_or(1);
    let cap = thread_cap(std::env::var(THREADS_ENV).ok().as_deref())?.unwrap_or(hardware);
    Ok(cap.min(hardware).min(jobs).max(1))
}

/// Probe every sequence, possibly across threads. Results land in slot
/// `i` for sequence `i` regardless of scheduling, so the outcome is
/// identical to a sequential pass.
fn eval_all(
    model: &RecurrentModel,
    encoder: &EncoderModel,
    sequences: &[&FrameSequence],
    checkpoints: &[usize],
    workers: usize,
) -> Result<Vec<SeqEval>> {
    if workers <= 1 || sequences.len() <= 1 {
        return sequences.iter().map(|s| eval_one(model, encoder, s, checkpoints)).collect();
    }
    let mut slots: Vec<Option<Result<SeqEval>>> = (0..sequences.len()).map(|_| None).collect();
    let chunk = sequences.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for (slot_chunk, seq_chunk) in slots.chunks_mut(chunk).zip(sequences.chunks(chunk)) {
            scope.spawn(move || {
                for (slot, seq) in slot_chunk.iter_mut().zip(seq_chunk) {
                    *slot = Some(eval_one(model, encoder, seq, checkpoints));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("each slot is filled by its chunk's worker")).collect()
}

fn validate_inputs(
    model: &RecurrentModel,
    encoder: &EncoderModel,
    sequences: &[&FrameSequence],
) -> Result<()> {
    if sequences.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one sequence".into()));
    }
    if encoder.embedding_dim != model.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "encoder produces {}-dim embeddings but the model expects {}-dim inputs",
            encoder.embedding_dim, model.input_dim
        )));
    }
    for (i, seq) in sequences.iter().enumerate() {
        if seq.frames.is_empty() {
            return Err(Error::InvalidArgument(format!("sequence {i} has no frames")));
        }
        if seq.label >= model.num_classes {
            return Err(Error::InvalidArgument(format!(
                "sequence {i} has label {} but the model distinguishes only {} classes",
                seq.label, model.num_classes
            )));
        }
    }
    Ok(())
}

fn assemble_full_video(evals: &[SeqEval], num_classes: usize) -> FullVideoAccuracy {
    let mut class_total = vec![0usize; num_classes];
    let mut class_correct = vec![0usize; num_classes];
    for ev in evals {
        class_total[ev.label] += 1;
        if ev.final_pred == ev.label {
            class_correct[ev.label] += 1;
        }
    }
    let per_class = class_total
        .iter()
        .zip(&class_correct)
        .map(|(&t, &c)| if t == 0 { None } else { Some(c as f64 / t as f64) })
        .collect();
    let overall = class_correct.iter().sum::<usize>() as f64 / evals.len() as f64;
    FullVideoAccuracy { per_class, overall, time_aligned: false }
}

/// Probe `model` on `sequences` at each checkpoint in `checkpoints`.
///
/// The prediction at checkpoint `c` is the argmax of the class
/// probabilities after the model has consumed steps `1..c`; argmax ties go
/// to the lowest class index. Any future-state head on the model is left
/// unused. Checkpoints must be strictly increasing, at least 1, and no
/// larger than the shortest sequence — every sequence must reach every
/// checkpoint for the curve to compare like with like.
pub fn evaluate(
    model: &RecurrentModel,
    encoder: &EncoderModel,
    sequences: &[&FrameSequence],
    checkpoints: &[usize],
) -> Result<EvalReport> {
    validate_inputs(model, encoder, sequences)?;
    if checkpoints.is_empty() {
        return Err(Error::InvalidArgument("checkpoint grid is empty".into()));
    }
    for pair in checkpoints.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::InvalidArgument(format!(
                "checkpoints must be strictly increasing, got {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    let shortest = sequences.iter().map(|s| s.frames.len()).min().expect("non-empty");
    for &c in checkpoints {
        if c == 0 {
            return Err(Error::InvalidArgument(
                "checkpoint 0 is before the first step; checkpoints start at 1".into(),
            ));
        }
        if c > shortest {
            return Err(Error::InvalidArgument(format!(
                "checkpoint {c} exceeds the shortest test sequence (length {shortest})"
            )));
        }
    }

    let workers = worker_count(sequences.len())?;
    let evals = eval_all(model, encoder, sequences, checkpoints, workers)?;

    // Single-threaded assembly over per-sequence results.
    let n = model.num_classes;
    let total = evals.len();
    let mut confusion = vec![vec![vec![0usize; n]; n]; checkpoints.len()];
    for ev in &evals {
        for (ci, &pred) in ev.checkpoint_preds.iter().enumerate() {
            confusion[ci][ev.label][pred] += 1;
        }
    }
    let accuracy_curve: Vec<f64> = confusion
        .iter()
        .map(|m| (0..n).map(|k| m[k][k]).sum::<usize>() as f64 / total as f64)
        .collect();
    let mut recall = Vec::with_capacity(checkpoints.len());
    let mut precision = Vec::with_capacity(checkpoints.len());
    for m in &confusion {
        let rec = (0..n)
            .map(|k| {
                let row: usize = m[k].iter().sum();
                if row == 0 { None } else { Some(m[k][k] as f64 / row as f64) }
            })
            .collect();
        let prec = (0..n)
            .map(|k| {
                let col: usize = (0..n).map(|r| m[r][k]).sum();
                if col == 0 { None } else { Some(m[k][k] as f64 / col as f64) }
            })
            .collect();
        recall.push(rec);
        precision.push(prec);
    }

    Ok(EvalReport {
        checkpoints: checkpoints.to_vec(),
        accuracy_curve,
        confusion,
        per_class: PerClassMetrics { recall, precision },
        full_video: assemble_full_video(&evals, n),
    })
}

/// Accuracy at each sequence's own final step, without a checkpoint grid.
///
/// Because "final step" means a different elapsed time for every sequence,
/// the result is flagged `time_aligned: false` and is reported per class;
/// it equals the checkpoint accuracy only when all sequences share one
/// length.
pub fn full_video_accuracy(
    model: &RecurrentModel,
    encoder: &EncoderModel,
    sequences: &[&FrameSequence],
) -> Result<FullVideoAccuracy> {
    validate_inputs(model, encoder, sequences)?;
    let workers = worker_count(sequences.len())?;
    let evals = eval_all(model, encoder, sequences, &[], workers)?;
    Ok(assemble_full_video(&evals, model.num_classes))
}

/// Write `report` as two files: the accuracy curve as CSV (header
/// `checkpoint,accuracy`) and the full report — confusion matrices,
/// per-class ratios, full-video block — as one JSON document with a fixed
/// field order.
pub fn write_report(report: &EvalReport, curve_csv: &Path, report_json: &Path) -> Result<()> {
    if report.accuracy_curve.len() != report.checkpoints.len() {
        return Err(Error::InvalidArgument(format!(
            "report has {} checkpoints but {} accuracy values",
            report.checkpoints.len(),
            report.accuracy_curve.len()
        )));
    }
    let mut csv = String::from("checkpoint,accuracy\n");
    for (c, a) in report.checkpoints.iter().zip(&report.accuracy_curve) {
        csv.push_str(&format!("{c},{a}\n"));
    }
    std::fs::write(curve_csv, csv).map_err(|e| Error::io(curve_csv, e))?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::InvalidArgument(format!("serializing report: {e}")))?;
    std::fs::write(report_json, json + "\n").map_err(|e| Error::io(report_json, e))?;
    Ok(())
}
