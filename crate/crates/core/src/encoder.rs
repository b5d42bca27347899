//! Frame encoder fine-tuned on sparsely sampled sub-videos. Sampled frames
//! are embedded, embeddings are max-pooled per coordinate with a step
//! weight that shrinks by half each quarter of the sequence, and the pooled
//! vector is classified. The max routes gradients: only frames that win at
//! least one coordinate receive any, scaled by their step weight.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::average_ce;
use crate::rng::substream;
use crate::synth::FrameSequence;
use crate::tensor::{
    affine, softmax, tanh_deriv, Mat, ParamTensors, TensorView, TensorViewMut, Vector,
};
use crate::trainer::{sgd_update, SgdConfig, SgdState};

pub const ENCODER_FORMAT_VERSION: u32 = 1;

/// Two affine+tanh stages D -> E -> E plus a softmax classifier E -> N.
/// Doubles as the gradient container for a backward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub l1_w: Mat,
    pub l1_b: Vector,
    pub l2_w: Mat,
    pub l2_b: Vector,
    pub cls_w: Mat,
    pub cls_b: Vector,
}

pub type EncoderGrads = EncoderParams;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub feature_dim: usize,
    pub embedding_dim: usize,
    pub num_classes: usize,
    /// Probability of zeroing an embedding coordinate during training
    /// (inverted dropout: survivors are scaled by 1/(1-p)).
    pub dropout_prob: f64,
    pub params: EncoderParams,
}

impl EncoderModel {
    /// Fresh model with every tensor drawn from its own seed substream,
    /// uniform in (-r, r), r = 1/sqrt(fan-in). A single output class is
    /// allowed (the softmax degenerates to a constant 1).
    pub fn new(
        feature_dim: usize,
        embedding_dim: usize,
        num_classes: usize,
        dropout_prob: f64,
        seed: u64,
    ) -> Result<Self> {
        if feature_dim == 0 || embedding_dim == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument(
                "encoder needs feature_dim >= 1, embedding_dim >= 1, num_classes >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&dropout_prob) {
            return Err(Error::InvalidArgument(format!(
                "dropout_prob must lie in [0, 1), got {dropout_prob}"
            )));
        }
        let uniform = |tag: &str, len: usize, fan_in: usize| -> Vec<f64> {
            let mut rng = substream(seed, tag);
            let r = 1.0 / (fan_in as f64).sqrt();
            (0..len).map(|_| rng.gen_range(-r..r)).collect()
        };
        let params = EncoderParams {
            l1_w: Mat::new(
                embedding_dim,
                feature_dim,
                uniform("encoder.l1.w", embedding_dim * feature_dim, feature_dim),
            )?,
            l1_b: Vector::new(uniform("encoder.l1.b", embedding_dim, feature_dim))?,
            l2_w: Mat::new(
                embedding_dim,
                embedding_dim,
                uniform("encoder.l2.w", embedding_dim * embedding_dim, embedding_dim),
            )?,
            l2_b: Vector::new(uniform("encoder.l2.b", embedding_dim, embedding_dim))?,
            cls_w: Mat::new(
                num_classes,
                embedding_dim,
                uniform("encoder.cls.w", num_classes * embedding_dim, embedding_dim),
            )?,
            cls_b: Vector::new(uniform("encoder.cls.b", num_classes, embedding_dim))?,
        };
        Ok(EncoderModel { feature_dim, embedding_dim, num_classes, dropout_prob, params })
    }

    /// Gradient container with this model's shapes, all zeros.
    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderParams {
            l1_w: Mat::zeros(self.embedding_dim, self.feature_dim),
            l1_b: Vector::zeros(self.embedding_dim),
            l2_w: Mat::zeros(self.embedding_dim, self.embedding_dim),
            l2_b: Vector::zeros(self.embedding_dim),
            cls_w: Mat::zeros(self.num_classes, self.embedding_dim),
            cls_b: Vector::zeros(self.num_classes),
        }
    }

    /// Embedding of one frame, dropout disabled.
    pub fn encode(&self, frame: &Vector) -> Result<Vector> {
        Ok(self.encode_parts(frame)?.1)
    }

    /// (hidden, embedding) pair; backward needs both.
    fn encode_parts(&self, frame: &Vector) -> Result<(Vector, Vector)> {
        if frame.dim() != self.feature_dim {
            return Err(Error::DimensionMismatch(format!(
                "frame has dimension {} (encoder expects {})",
                frame.dim(),
                self.feature_dim
            )));
        }
        let mut h1 = affine(&self.params.l1_w, frame, &self.params.l1_b)?;
        for v in h1.as_mut_slice() {
            *v = v.tanh();
        }
        let mut e = affine(&self.params.l2_w, &h1, &self.params.l2_b)?;
        for v in e.as_mut_slice() {
            *v = v.tanh();
        }
        Ok((h1, e))
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Strictly increasing 1-based step indices into a sequence of length T.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    indices: Vec<usize>,
}

impl SampleSet {
    pub fn new(indices: Vec<usize>, seq_len: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("sample set must be non-empty".into()));
        }
        for (k, &t) in indices.iter().enumerate() {
            if t < 1 || t > seq_len {
                return Err(Error::InvalidArgument(format!(
                    "sampled step {t} outside [1, {seq_len}]"
                )));
            }
            if k > 0 && indices[k - 1] >= t {
                return Err(Error::InvalidArgument(
                    "sampled steps must be strictly increasing".into(),
                ));
            }
        }
        Ok(SampleSet { indices })
    }

    /// Every step of the sequence.
    pub fn full(seq_len: usize) -> Result<Self> {
        SampleSet::new((1..=seq_len).collect(), seq_len)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// How sub-video frames are drawn: the sequence is cut into consecutive
/// segments of `segment_len` steps and `per_segment` distinct steps are
/// drawn uniformly from each (all of them when a segment is shorter).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub segment_len: usize,
    pub per_segment: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { segment_len: 200, per_segment: 2 }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segment_len == 0 || self.per_segment == 0 {
            return Err(Error::InvalidArgument(
                "segment_len and per_segment must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Draw a fresh sample set: ceil(T / segment_len) consecutive segments,
/// min(per_segment, segment size) distinct steps from each, sorted.
pub fn segment_sample(
    seq_len: usize,
    cfg: &SampleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SampleSet> {
    cfg.validate()?;
    if seq_len == 0 {
        return Err(Error::InvalidArgument("cannot sample an empty sequence".into()));
    }
    let mut indices = Vec::new();
    let mut start = 0; // 0-based offset of the segment
    while start < seq_len {
        let size = cfg.segment_len.min(seq_len - start);
        let k = cfg.per_segment.min(size);
        for offset in rand::seq::index::sample(rng, size, k) {
            indices.push(start + offset + 1);
        }
        start += size;
    }
    indices.sort_unstable();
    SampleSet::new(indices, seq_len)
}

/// Step weight: 1 before T/4, then 0.5, 0.25, and 0.125 for the remaining
/// quarters (real-valued boundaries, each interval closed below).
pub fn early_weight(t: usize, seq_len: usize) -> Result<f64> {
    if seq_len == 0 || t < 1 || t > seq_len {
        return Err(Error::InvalidArgument(format!(
            "step {t} outside [1, {seq_len}]"
        )));
    }
    let tf = t as f64;
    let quarter = seq_len as f64 / 4.0;
    Ok(if tf < quarter {
        1.0
    } else if tf < 2.0 * quarter {
        0.5
    } else if tf < 3.0 * quarter {
        0.25
    } else {
        0.125
    })
}

/// Pooled vector plus, per coordinate, the step whose weighted value won.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures {
    pub values: Vector,
    pub argmax_steps: Vec<usize>,
}

/// Coordinate-wise max of w_t * f_t over the supplied (step, vector) pairs;
/// w_t = 1 when `weights_on` is false. Ties go to the smallest step no
/// matter the supply order, so pooling is permutation-invariant.
pub fn weighted_max_pool(
    features: &[(usize, Vector)],
    seq_len: usize,
    weights_on: bool,
) -> Result<PooledFeatures> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("cannot pool zero frames".into()));
    }
    let dim = features[0].1.dim();
    let mut values = vec![f64::NEG_INFINITY; dim];
    let mut argmax_steps = vec![0usize; dim];
    for (t, f) in features {
        if f.dim() != dim {
            return Err(Error::DimensionMismatch(format!(
                "pooled frames disagree on dimension: {} vs {dim}",
                f.dim()
            )));
        }
        let w = if weights_on { early_weight(*t, seq_len)? } else { 1.0 };
        for j in 0..dim {
            let candidate = w * f[j];
            if candidate > values[j] || (candidate == values[j] && *t < argmax_steps[j]) {
                values[j] = candidate;
                argmax_steps[j] = *t;
            }
        }
    }
    Ok(PooledFeatures { values: Vector::new(values)?, argmax_steps })
}

/// The three fine-tuning regimes; the no-fine-tuning comparison point is a
/// freshly initialized model that never takes a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    SingleFrame,
    UnweightedSubvideo,
    WeightedSubvideo,
}

/// Per-frame keep masks for inverted dropout on the embedding. `None` when
/// the model trains without dropout.
pub fn draw_dropout_masks(
    model: &EncoderModel,
    frames: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<Vec<bool>>> {
    if model.dropout_prob == 0.0 {
        return None;
    }
    let keep = 1.0 - model.dropout_prob;
    Some(
        (0..frames)
            .map(|_| (0..model.embedding_dim).map(|_| rng.gen_bool(keep)).collect())
            .collect(),
    )
}

fn check_masks(model: &EncoderModel, masks: Option<&[Vec<bool>]>, frames: usize) -> Result<()> {
    if let Some(m) = masks {
        if m.len() != frames || m.iter().any(|row| row.len() != model.embedding_dim) {
            return Err(Error::DimensionMismatch(format!(
                "dropout masks must be {frames} x {}",
                model.embedding_dim
            )));
        }
    }
    Ok(())
}

/// Cross-entropy of the pooled sub-video prediction plus exact gradients.
/// The sample set and dropout masks are explicit so the landscape is fixed
/// and differentiable-by-inspection; pass `masks: None` to disable dropout.
pub fn subvideo_loss_and_grads(
    model: &EncoderModel,
    seq: &FrameSequence,
    sample: &SampleSet,
    weights_on: bool,
    masks: Option<&[Vec<bool>]>,
) -> Result<(f64, EncoderGrads)> {
    model.check_label(seq.label)?;
    check_masks(model, masks, sample.len())?;
    let seq_len = seq.frames.len();
    if sample.indices().last().copied().unwrap_or(0) > seq_len {
        return Err(Error::InvalidArgument(format!(
            "sample set reaches past the sequence (length {seq_len})"
        )));
    }
    let keep_scale = 1.0 / (1.0 - model.dropout_prob);

    // Forward: embed every sampled frame, mask, pool, classify.
    let mut hidden = Vec::with_capacity(sample.len());
    let mut embeddings = Vec::with_capacity(sample.len());
    let mut pooled_inputs = Vec::with_capacity(sample.len());
    for (k, &t) in sample.indices().iter().enumerate() {
        let (h1, e) = model.encode_parts(&seq.frames[t - 1])?;
        let mut dropped = e.clone();
        if let Some(m) = masks {
            for (j, v) in dropped.as_mut_slice().iter_mut().enumerate() {
                *v = if m[k][j] { *v * keep_scale } else { 0.0 };
            }
        }
        hidden.push(h1);
        embeddings.push(e);
        pooled_inputs.push((t, dropped));
    }
    let pooled = weighted_max_pool(&pooled_inputs, seq_len, weights_on)?;
    let logits = affine(&model.params.cls_w, &pooled.values, &model.params.cls_b)?;
    let probs = softmax(logits.as_slice())?;
    let (loss, mut d_logits) = average_ce(std::slice::from_ref(&probs), seq.label, 1)?;
    let dz = d_logits.pop().expect("single-step gradient");

    // Backward: classifier, then route through the per-coordinate winners.
    let mut grads = model.zero_grads();
    grads.cls_w.add_outer(&dz, &pooled.values)?;
    grads.cls_b.axpy(1.0, &dz)?;
    let d_pooled = model.params.cls_w.matvec_t(&dz)?;

    let mut d_embedding: Vec<Option<Vector>> = vec![None; sample.len()];
    let position: std::collections::HashMap<usize, usize> =
        sample.indices().iter().enumerate().map(|(k, &t)| (t, k)).collect();
    for j in 0..model.embedding_dim {
        let winner = pooled.argmax_steps[j];
        let k = position[&winner];
        let w = if weights_on { early_weight(winner, seq_len)? } else { 1.0 };
        let upstream = d_embedding[k].get_or_insert_with(|| Vector::zeros(model.embedding_dim));
        // d/d(masked embedding), then through the mask's scale.
        let through_mask = match masks {
            Some(m) if !m[k][j] => 0.0,
            Some(_) => keep_scale,
            None => 1.0,
        };
        upstream[j] += w * d_pooled[j] * through_mask;
    }

    for (k, upstream) in d_embedding.into_iter().enumerate() {
        let Some(de) = upstream else { continue }; // non-winning frame: exactly zero
        let t = sample.indices()[k];
        let x = &seq.frames[t - 1];
        let mut da2 = de;
        for (j, v) in da2.as_mut_slice().iter_mut().enumerate() {
            *v *= tanh_deriv(embeddings[k][j]);
        }
        grads.l2_w.add_outer(&da2, &hidden[k])?;
        grads.l2_b.axpy(1.0, &da2)?;
        let mut da1 = model.params.l2_w.matvec_t(&da2)?;
        for (j, v) in da1.as_mut_slice().iter_mut().enumerate() {
            *v *= tanh_deriv(hidden[k][j]);
        }
        grads.l1_w.add_outer(&da1, x)?;
        grads.l1_b.axpy(1.0, &da1)?;
    }
    Ok((loss, grads))
}

/// Cross-entropy of one frame's prediction plus exact gradients; the
/// single-frame fine-tuning comparison. `mask: None` disables dropout.
pub fn single_frame_loss_and_grads(
    model: &EncoderModel,
    frame: &Vector,
    label: usize,
    mask: Option<&[bool]>,
) -> Result<(f64, EncoderGrads)> {
    model.check_label(label)?;
    if let Some(m) = mask {
        if m.len() != model.embedding_dim {
            return Err(Error::DimensionMismatch(format!(
                "dropout mask must have length {}",
                model.embedding_dim
            )));
        }
    }
    let keep_scale = 1.0 / (1.0 - model.dropout_prob);
    let (h1, e) = model.encode_parts(frame)?;
    let mut dropped = e.clone();
    if let Some(m) = mask {
        for (j, v) in dropped.as_mut_slice().iter_mut().enumerate() {
            *v = if m[j] { *v * keep_scale } else { 0.0 };
        }
    }
    let logits = affine(&model.params.cls_w, &dropped, &model.params.cls_b)?;
    let probs = softmax(logits.as_slice())?;
    let (loss, mut d_logits) = average_ce(std::slice::from_ref(&probs), label, 1)?;
    let dz = d_logits.pop().expect("single-step gradient");

    let mut grads = model.zero_grads();
    grads.cls_w.add_outer(&dz, &dropped)?;
    grads.cls_b.axpy(1.0, &dz)?;
    let mut de = model.params.cls_w.matvec_t(&dz)?;
    if let Some(m) = mask {
        for (j, v) in de.as_mut_slice().iter_mut().enumerate() {
            *v = if m[j] { *v * keep_scale } else { 0.0 };
        }
    }
    let mut da2 = de;
    for (j, v) in da2.as_mut_slice().iter_mut().enumerate() {
        *v *= tanh_deriv(e[j]);
    }
    grads.l2_w.add_outer(&da2, &h1)?;
    grads.l2_b.axpy(1.0, &da2)?;
    let mut da1 = model.params.l2_w.matvec_t(&da2)?;
    for (j, v) in da1.as_mut_slice().iter_mut().enumerate() {
        *v *= tanh_deriv(h1[j]);
    }
    grads.l1_w.add_outer(&da1, frame)?;
    grads.l1_b.axpy(1.0, &da1)?;
    Ok((loss, grads))
}

/// One training step on one sequence: draw this iteration's frames (and
/// dropout masks, in that order), compute the loss for `mode`, and apply
/// an SGD update. Returns the loss before the update.
pub fn finetune_step(
    model: &mut EncoderModel,
    seq: &FrameSequence,
    mode: FinetuneMode,
    sample_cfg: &SampleConfig,
    sgd_cfg: &SgdConfig,
    sgd_state: &mut SgdState,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if seq.frames.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty sequence".into()));
    }
    let (loss, grads) = match mode {
        FinetuneMode::SingleFrame => {
            let t = rng.gen_range(1..=seq.frames.len());
            let mask = draw_dropout_masks(model, 1, rng).map(|mut m| m.pop().expect("one mask"));
            single_frame_loss_and_grads(model, &seq.frames[t - 1], seq.label, mask.as_deref())?
        }
        FinetuneMode::UnweightedSubvideo | FinetuneMode::WeightedSubvideo => {
            let sample = segment_sample(seq.frames.len(), sample_cfg, rng)?;
            let masks = draw_dropout_masks(model, sample.len(), rng);
            let weights_on = mode == FinetuneMode::WeightedSubvideo;
            subvideo_loss_and_grads(model, seq, &sample, weights_on, masks.as_deref())?
        }
    };
    sgd_update(model, &grads, sgd_state, sgd_cfg)?;
    Ok(loss)
}

/// Embedding of every frame in order, dropout disabled.
pub fn extract_features(model: &EncoderModel, seq: &FrameSequence) -> Result<Vec<Vector>> {
    seq.frames.iter().map(|f| model.encode(f)).collect()
}

impl ParamTensors for EncoderParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        vec![
            TensorView { name: "encoder.l1.w", data: self.l1_w.as_slice(), decay: true },
            TensorView { name: "encoder.l1.b", data: self.l1_b.as_slice(), decay: false },
            TensorView { name: "encoder.l2.w", data: self.l2_w.as_slice(), decay: true },
            TensorView { name: "encoder.l2.b", data: self.l2_b.as_slice(), decay: false },
            TensorView { name: "encoder.cls.w", data: self.cls_w.as_slice(), decay: true },
            TensorView { name: "encoder.cls.b", data: self.cls_b.as_slice(), decay: false },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        vec![
            TensorViewMut { name: "encoder.l1.w", data: self.l1_w.as_mut_slice(), decay: true },
            TensorViewMut { name: "encoder.l1.b", data: self.l1_b.as_mut_slice(), decay: false },
            TensorViewMut { name: "encoder.l2.w", data: self.l2_w.as_mut_slice(), decay: true },
            TensorViewMut { name: "encoder.l2.b", data: self.l2_b.as_mut_slice(), decay: false },
            TensorViewMut { name: "encoder.cls.w", data: self.cls_w.as_mut_slice(), decay: true },
            TensorViewMut { name: "encoder.cls.b", data: self.cls_b.as_mut_slice(), decay: false },
        ]
    }
}

impl ParamTensors for EncoderModel {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        self.params.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        self.params.tensors_mut()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EncoderCheckpoint {
    version: u32,
    kind: String,
    feature_dim: usize,
    embedding_dim: usize,
    num_classes: usize,
    dropout_prob: f64,
    params: EncoderParams,
}

/// Save an encoder checkpoint as JSON with shortest-roundtrip floats, so
/// loading restores the parameters bit for bit.
pub fn save_encoder(model: &EncoderModel, path: &Path) -> Result<()> {
    let doc = EncoderCheckpoint {
        version: ENCODER_FORMAT_VERSION,
        kind: "encoder".into(),
        feature_dim: model.feature_dim,
        embedding_dim: model.embedding_dim,
        num_classes: model.num_classes,
        dropout_prob: model.dropout_prob,
        params: model.params.clone(),
    };
    let text = serde_json::to_string(&doc)
        .map_err(|e| Error::InvalidArgument(format!("serializing encoder: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint written by [`save_encoder`], validating version, kind,
/// and every tensor shape.
pub fn load_encoder(path: &Path) -> Result<EncoderModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: EncoderCheckpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line().max(1),
        message: format!("encoder checkpoint: {e}"),
    })?;
    if doc.version != ENCODER_FORMAT_VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported encoder version {} (expected {})",
            doc.version, ENCODER_FORMAT_VERSION
        )));
    }
    if doc.kind != "encoder" {
        return Err(Error::InvalidArgument(format!(
            "checkpoint kind '{}' is not an encoder",
            doc.kind
        )));
    }
    if !(0.0..1.0).contains(&doc.dropout_prob) {
        return Err(Error::InvalidArgument(format!(
            "checkpoint dropout_prob {} outside [0, 1)",
            doc.dropout_prob
        )));
    }
    let (d, e, n) = (doc.feature_dim, doc.embedding_dim, doc.num_classes);
    let check = |name: &str, mat: &Mat, rows: usize, cols: usize| -> Result<()> {
        if mat.rows() != rows || mat.cols() != cols {
            return Err(Error::InvalidArgument(format!(
                "checkpoint tensor {name} has shape {}x{} (expected {rows}x{cols})",
                mat.rows(),
                mat.cols()
            )));
        }
        Ok(())
    };
    check("encoder.l1.w", &doc.params.l1_w, e, d)?;
    check("encoder.l2.w", &doc.params.l2_w, e, e)?;
    check("encoder.cls.w", &doc.params.cls_w, n, e)?;
    for (name, vec, dim) in [
        ("encoder.l1.b", &doc.params.l1_b, e),
        ("encoder.l2.b", &doc.params.l2_b, e),
        ("encoder.cls.b", &doc.params.cls_b, n),
    ] {
        if vec.dim() != dim {
            return Err(Error::InvalidArgument(format!(
                "checkpoint tensor {name} has dimension {} (expected {dim})",
                vec.dim()
            )));
        }
    }
    Ok(EncoderModel {
        feature_dim: d,
        embedding_dim: e,
        num_classes: n,
        dropout_prob: doc.dropout_prob,
        params: doc.params,
    })
}
