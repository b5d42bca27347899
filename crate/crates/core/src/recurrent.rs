//! LSTM sequence model, written out by hand: four gates, cell and hidden
//! state, a softmax classification head on every step, and (for student
//! models) a linear head that predicts a future hidden state. Backward is
//! full backpropagation through time over the whole sequence; gradients
//! are exact, which the finite-difference suite holds it to.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::{
    affine, sigmoid, sigmoid_deriv, softmax, tanh_deriv, Mat, ParamTensors, TensorView,
    TensorViewMut, Vector,
};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Parameters of one gate: input weights, recurrent weights, bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub w_x: Mat,
    pub w_h: Mat,
    pub b: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input_gate: GateParams,
    pub forget_gate: GateParams,
    pub output_gate: GateParams,
    pub candidate: GateParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub w: Mat,
    pub b: Vector,
}

/// The full parameter set of a recurrent model. Doubles as the gradient
/// container: a backward pass returns one of these with the same shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentParams {
    pub lstm: LstmParams,
    pub class_head: AffineParams,
    pub future_head: Option<AffineParams>,
}

pub type RecurrentGrads = RecurrentParams;

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentModel {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub params: RecurrentParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vector,
    pub c: Vector,
}

impl LstmState {
    pub fn zeros(hidden_dim: usize) -> Self {
        LstmState { h: Vector::zeros(hidden_dim), c: Vector::zeros(hidden_dim) }
    }
}

/// Forward trace of one sequence: hidden states, class probabilities,
/// and (students only) future-state predictions, one entry per step.
#[derive(Debug, Clone)]
pub struct SequenceTrace {
    pub hidden: Vec<Vector>,
    pub probs: Vec<Vector>,
    pub future_pred: Option<Vec<Vector>>,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let r = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-r..r)).collect()
}

fn init_gate(seed: u64, name: &str, hidden: usize, input: usize, bias_value: Option<f64>) -> GateParams {
    let w_x = Mat::new(
        hidden,
        input,
        uniform_tensor(&mut substream(seed, &format!("{name}.w_x")), hidden * input, input),
    )
    .expect("finite init");
    let w_h = Mat::new(
        hidden,
        hidden,
        uniform_tensor(&mut substream(seed, &format!("{name}.w_h")), hidden * hidden, hidden),
    )
    .expect("finite init");
    let b = match bias_value {
        Some(v) => Vector::new(vec![v; hidden]).expect("finite init"),
        None => Vector::new(uniform_tensor(
            &mut substream(seed, &format!("{name}.b")),
            hidden,
            hidden,
        ))
        .expect("finite init"),
    };
    GateParams { w_x, w_h, b }
}

fn init_affine(seed: u64, name: &str, rows: usize, cols: usize) -> AffineParams {
    let w = Mat::new(
        rows,
        cols,
        uniform_tensor(&mut substream(seed, &format!("{name}.w")), rows * cols, cols),
    )
    .expect("finite init");
    let b = Vector::new(uniform_tensor(&mut substream(seed, &format!("{name}.b")), rows, cols))
        .expect("finite init");
    AffineParams { w, b }
}

impl RecurrentModel {
    /// Fresh model. Weights are uniform in (-r, r) with r = 1/sqrt(fan-in)
    /// of the tensor; the forget gate bias starts at 1.0 so early training
    /// does not erase the cell state. Every tensor draws from its own
    /// seed substream, so a student shares the teacher's initial values
    /// for all tensors they have in common.
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        with_future_head: bool,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || num_classes < 2 {
            return Err(Error::InvalidArgument(
                "recurrent model needs input_dim >= 1, hidden_dim >= 1, num_classes >= 2".into(),
            ));
        }
        let lstm = LstmParams {
            input_gate: init_gate(seed, "lstm.input", hidden_dim, input_dim, None),
            forget_gate: init_gate(seed, "lstm.forget", hidden_dim, input_dim, Some(1.0)),
            output_gate: init_gate(seed, "lstm.output", hidden_dim, input_dim, None),
            candidate: init_gate(seed, "lstm.candidate", hidden_dim, input_dim, None),
        };
        let class_head = init_affine(seed, "class_head", num_classes, hidden_dim);
        let future_head =
            with_future_head.then(|| init_affine(seed, "future_head", hidden_dim, hidden_dim));
        Ok(RecurrentModel {
            input_dim,
            hidden_dim,
            num_classes,
            params: RecurrentParams { lstm, class_head, future_head },
        })
    }

    pub fn has_future_head(&self) -> bool {
        self.params.future_head.is_some()
    }

    /// Gradient container with this model's shapes, all zeros.
    pub fn zero_grads(&self) -> RecurrentGrads {
        let zero_gate = || GateParams {
            w_x: Mat::zeros(self.hidden_dim, self.input_dim),
            w_h: Mat::zeros(self.hidden_dim, self.hidden_dim),
            b: Vector::zeros(self.hidden_dim),
        };
        RecurrentParams {
            lstm: LstmParams {
                input_gate: zero_gate(),
                forget_gate: zero_gate(),
                output_gate: zero_gate(),
                candidate: zero_gate(),
            },
            class_head: AffineParams {
                w: Mat::zeros(self.num_classes, self.hidden_dim),
                b: Vector::zeros(self.num_classes),
            },
            future_head: self.params.future_head.as_ref().map(|_| AffineParams {
                w: Mat::zeros(self.hidden_dim, self.hidden_dim),
                b: Vector::zeros(self.hidden_dim),
            }),
        }
    }

    fn check_features(&self, features: &[Vector]) -> Result<()> {
        if features.is_empty() {
            return Err(Error::InvalidArgument("empty feature sequence".into()));
        }
        for (t, x) in features.iter().enumerate() {
            if x.dim() != self.input_dim {
                return Err(Error::DimensionMismatch(format!(
                    "feature at step {} has dimension {} (expected {})",
                    t + 1,
                    x.dim(),
                    self.input_dim
                )));
            }
        }
        Ok(())
    }
}

impl ParamTensors for RecurrentParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::with_capacity(16);
        let gates = [
            ("lstm.input", &self.lstm.input_gate),
            ("lstm.forget", &self.lstm.forget_gate),
            ("lstm.output", &self.lstm.output_gate),
            ("lstm.candidate", &self.lstm.candidate),
        ];
        let names: [[&'static str; 3]; 4] = [
            ["lstm.input.w_x", "lstm.input.w_h", "lstm.input.b"],
            ["lstm.forget.w_x", "lstm.forget.w_h", "lstm.forget.b"],
            ["lstm.output.w_x", "lstm.output.w_h", "lstm.output.b"],
            ["lstm.candidate.w_x", "lstm.candidate.w_h", "lstm.candidate.b"],
        ];
        for (i, (_, g)) in gates.iter().enumerate() {
            out.push(TensorView { name: names[i][0], data: g.w_x.as_slice(), decay: true });
            out.push(TensorView { name: names[i][1], data: g.w_h.as_slice(), decay: true });
            out.push(TensorView { name: names[i][2], data: g.b.as_slice(), decay: false });
        }
        out.push(TensorView { name: "class_head.w", data: self.class_head.w.as_slice(), decay: true });
        out.push(TensorView { name: "class_head.b", data: self.class_head.b.as_slice(), decay: false });
        if let Some(f) = &self.future_head {
            out.push(TensorView { name: "future_head.w", data: f.w.as_slice(), decay: true });
            out.push(TensorView { name: "future_head.b", data: f.b.as_slice(), decay: false });
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        let mut out = Vec::with_capacity(16);
        let gates = [
            ("lstm.input.w_x", "lstm.input.w_h", "lstm.input.b", &mut self.lstm.input_gate),
            ("lstm.forget.w_x", "lstm.forget.w_h", "lstm.forget.b", &mut self.lstm.forget_gate),
            ("lstm.output.w_x", "lstm.output.w_h", "lstm.output.b", &mut self.lstm.output_gate),
            (
                "lstm.candidate.w_x",
                "lstm.candidate.w_h",
                "lstm.candidate.b",
                &mut self.lstm.candidate,
            ),
        ];
        for (nx, nh, nb, g) in gates {
            out.push(TensorViewMut { name: nx, data: g.w_x.as_mut_slice(), decay: true });
            out.push(TensorViewMut { name: nh, data: g.w_h.as_mut_slice(), decay: true });
            out.push(TensorViewMut { name: nb, data: g.b.as_mut_slice(), decay: false });
        }
        out.push(TensorViewMut {
            name: "class_head.w",
            data: self.class_head.w.as_mut_slice(),
            decay: true,
        });
        out.push(TensorViewMut {
            name: "class_head.b",
            data: self.class_head.b.as_mut_slice(),
            decay: false,
        });
        if let Some(f) = &mut self.future_head {
            out.push(TensorViewMut { name: "future_head.w", data: f.w.as_mut_slice(), decay: true });
            out.push(TensorViewMut { name: "future_head.b", data: f.b.as_mut_slice(), decay: false });
        }
        out
    }
}

impl ParamTensors for RecurrentModel {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        self.params.tensors()
    }
    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        self.params.tensors_mut()
    }
}

struct StepCache {
    h_prev: Vector,
    c_prev: Vector,
    i: Vector,
    f: Vector,
    o: Vector,
    g: Vector,
    c: Vector,
    tanh_c: Vector,
    h: Vector,
}

fn gate_pre(gate: &GateParams, x: &Vector, h: &Vector) -> Result<Vector> {
    let mut pre = affine(&gate.w_x, x, &gate.b)?;
    let rec = gate.w_h.matvec(h)?;
    pre.axpy(1.0, &rec)?;
    Ok(pre)
}

fn step_with_cache(params: &LstmParams, x: &Vector, state: &LstmState) -> Result<StepCache> {
    let hidden = state.h.dim();
    let mut i = gate_pre(&params.input_gate, x, &state.h)?;
    let mut f = gate_pre(&params.forget_gate, x, &state.h)?;
    let mut o = gate_pre(&params.output_gate, x, &state.h)?;
    let mut g = gate_pre(&params.candidate, x, &state.h)?;
    for v in i.as_mut_slice() {
        *v = sigmoid(*v);
    }
    for v in f.as_mut_slice() {
        *v = sigmoid(*v);
    }
    for v in o.as_mut_slice() {
        *v = sigmoid(*v);
    }
    for v in g.as_mut_slice() {
        *v = v.tanh();
    }
    let mut c = Vector::zeros(hidden);
    for j in 0..hidden {
        c[j] = f[j] * state.c[j] + i[j] * g[j];
    }
    let mut tanh_c = Vector::zeros(hidden);
    let mut h = Vector::zeros(hidden);
    for j in 0..hidden {
        tanh_c[j] = c[j].tanh();
        h[j] = o[j] * tanh_c[j];
    }
    Ok(StepCache {
        h_prev: state.h.clone(),
        c_prev: state.c.clone(),
        i,
        f,
        o,
        g,
        c,
        tanh_c,
        h,
    })
}

/// One LSTM step: gates from the current input and previous hidden state,
/// then the cell and hidden updates.
pub fn lstm_step(params: &LstmParams, x: &Vector, state: &LstmState) -> Result<LstmState> {
    let cache = step_with_cache(params, x, state)?;
    Ok(LstmState { h: cache.h, c: cache.c })
}

fn forward_with_cache(
    model: &RecurrentModel,
    features: &[Vector],
) -> Result<(SequenceTrace, Vec<StepCache>)> {
    model.check_features(features)?;
    let mut state = LstmState::zeros(model.hidden_dim);
    let mut caches = Vec::with_capacity(features.len());
    let mut hidden = Vec::with_capacity(features.len());
    let mut probs = Vec::with_capacity(features.len());
    let mut future_pred = model.params.future_head.as_ref().map(|_| Vec::with_capacity(features.len()));

    for x in features {
        let cache = step_with_cache(&model.params.lstm, x, &state)?;
        state = LstmState { h: cache.h.clone(), c: cache.c.clone() };
        let logits = affine(&model.params.class_head.w, &state.h, &model.params.class_head.b)?;
        probs.push(softmax(logits.as_slice())?);
        if let (Some(head), Some(preds)) = (&model.params.future_head, future_pred.as_mut()) {
            preds.push(affine(&head.w, &state.h, &head.b)?);
        }
        hidden.push(state.h.clone());
        caches.push(cache);
    }

    Ok((SequenceTrace { hidden, probs, future_pred }, caches))
}

/// Run the model over a whole sequence from a zero initial state.
pub fn forward_sequence(model: &RecurrentModel, features: &[Vector]) -> Result<SequenceTrace> {
    forward_with_cache(model, features).map(|(trace, _)| trace)
}

/// Hidden states of a (teacher) model over a sequence; used as future
/// targets. The model is borrowed immutably and never changed.
pub fn record_teacher_states(model: &RecurrentModel, features: &[Vector]) -> Result<Vec<Vector>> {
    Ok(forward_sequence(model, features)?.hidden)
}

/// Full backpropagation through time. `d_logits[t]` and `d_future[t]` are
/// the loss gradients at step t+1 with respect to the class logits and
/// the future prediction; either list may be shorter than the sequence,
/// in which case the remaining steps contribute nothing. Passing future
/// gradients to a model without a future head is an error.
pub fn backward_sequence(
    model: &RecurrentModel,
    features: &[Vector],
    d_logits: &[Vector],
    d_future: &[Vector],
) -> Result<RecurrentGrads> {
    let (_, caches) = forward_with_cache(model, features)?;
    let t_len = features.len();
    if d_logits.len() > t_len {
        return Err(Error::InvalidArgument(format!(
            "{} logit gradients for a {}-step sequence",
            d_logits.len(),
            t_len
        )));
    }
    if !d_future.is_empty() && model.params.future_head.is_none() {
        return Err(Error::InvalidArgument(
            "future gradients supplied but the model has no future head".into(),
        ));
    }
    if d_future.len() > t_len {
        return Err(Error::InvalidArgument(format!(
            "{} future gradients for a {}-step sequence",
            d_future.len(),
            t_len
        )));
    }
    for (t, g) in d_logits.iter().enumerate() {
        if g.dim() != model.num_classes {
            return Err(Error::DimensionMismatch(format!(
                "logit gradient at step {} has dimension {} (expected {})",
                t + 1,
                g.dim(),
                model.num_classes
            )));
        }
    }
    for (t, g) in d_future.iter().enumerate() {
        if g.dim() != model.hidden_dim {
            return Err(Error::DimensionMismatch(format!(
                "future gradient at step {} has dimension {} (expected {})",
                t + 1,
                g.dim(),
                model.hidden_dim
            )));
        }
    }

    let hidden = model.hidden_dim;
    let mut grads = model.zero_grads();
    let mut dh_next = Vector::zeros(hidden);
    let mut dc_next = Vector::zeros(hidden);

    for t in (0..t_len).rev() {
        let cache = &caches[t];
        let mut dh = dh_next;

        if t < d_logits.len() {
            let dl = &d_logits[t];
            dh.axpy(1.0, &model.params.class_head.w.matvec_t(dl)?)?;
            grads.class_head.w.add_outer(dl, &cache.h)?;
            grads.class_head.b.axpy(1.0, dl)?;
        }
        if t < d_future.len() {
            let df = &d_future[t];
            let head = model.params.future_head.as_ref().expect("checked above");
            let ghead = grads.future_head.as_mut().expect("same shape");
            dh.axpy(1.0, &head.w.matvec_t(df)?)?;
            ghead.w.add_outer(df, &cache.h)?;
            ghead.b.axpy(1.0, df)?;
        }

        let mut do_pre = Vector::zeros(hidden);
        let mut dc = Vector::zeros(hidden);
        for j in 0..hidden {
            do_pre[j] = dh[j] * cache.tanh_c[j] * sigmoid_deriv(cache.o[j]);
            dc[j] = dh[j] * cache.o[j] * tanh_deriv(cache.tanh_c[j]) + dc_next[j];
        }
        let mut di_pre = Vector::zeros(hidden);
        let mut df_pre = Vector::zeros(hidden);
        let mut dg_pre = Vector::zeros(hidden);
        for j in 0..hidden {
            di_pre[j] = dc[j] * cache.g[j] * sigmoid_deriv(cache.i[j]);
            df_pre[j] = dc[j] * cache.c_prev[j] * sigmoid_deriv(cache.f[j]);
            dg_pre[j] = dc[j] * cache.i[j] * tanh_deriv(cache.g[j]);
        }

        let x = &features[t];
        let gate_grads = [
            (&mut grads.lstm.input_gate, &di_pre, &model.params.lstm.input_gate),
            (&mut grads.lstm.forget_gate, &df_pre, &model.params.lstm.forget_gate),
            (&mut grads.lstm.output_gate, &do_pre, &model.params.lstm.output_gate),
            (&mut grads.lstm.candidate, &dg_pre, &model.params.lstm.candidate),
        ];
        let mut dh_prev = Vector::zeros(hidden);
        for (g, pre, params) in gate_grads {
            g.w_x.add_outer(pre, x)?;
            g.w_h.add_outer(pre, &cache.h_prev)?;
            g.b.axpy(1.0, pre)?;
            dh_prev.axpy(1.0, &params.w_h.matvec_t(pre)?)?;
        }

        dh_next = dh_prev;
        let mut dc_prev = Vector::zeros(hidden);
        for j in 0..hidden {
            dc_prev[j] = dc[j] * cache.f[j];
        }
        dc_next = dc_prev;
    }

    Ok(grads)
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelCheckpoint {
    version: u32,
    kind: String,
    input_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
    params: RecurrentParams,
}

/// Save a model checkpoint as JSON. Floats use shortest-roundtrip
/// formatting, so loading restores the parameters bit for bit.
pub fn save_model(model: &RecurrentModel, path: &Path) -> Result<()> {
    let doc = ModelCheckpoint {
        version: MODEL_FORMAT_VERSION,
        kind: if model.has_future_head() { "student".into() } else { "teacher".into() },
        input_dim: model.input_dim,
        hidden_dim: model.hidden_dim,
        num_classes: model.num_classes,
        params: model.params.clone(),
    };
    let text = serde_json::to_string(&doc)
        .map_err(|e| Error::InvalidArgument(format!("serializing model: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint written by [`save_model`], validating version,
/// declared kind, and every tensor shape.
pub fn load_model(path: &Path) -> Result<RecurrentModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ModelCheckpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line().max(1),
        message: format!("model checkpoint: {e}"),
    })?;
    if doc.version != MODEL_FORMAT_VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported model version {} (expected {})",
            doc.version, MODEL_FORMAT_VERSION
        )));
    }
    let has_future = doc.params.future_head.is_some();
    match (doc.kind.as_str(), has_future) {
        ("teacher", false) | ("student", true) => {}
        (kind, _) => {
            return Err(Error::InvalidArgument(format!(
                "checkpoint kind '{kind}' does not match future head presence ({has_future})"
            )))
        }
    }
    let (e, h, n) = (doc.input_dim, doc.hidden_dim, doc.num_classes);
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
    for (name, gate) in [
        ("lstm.input", &doc.params.lstm.input_gate),
        ("lstm.forget", &doc.params.lstm.forget_gate),
        ("lstm.output", &doc.params.lstm.output_gate),
        ("lstm.candidate", &doc.params.lstm.candidate),
    ] {
        check(&format!("{name}.w_x"), &gate.w_x, h, e)?;
        check(&format!("{name}.w_h"), &gate.w_h, h, h)?;
        if gate.b.dim() != h {
            return Err(Error::InvalidArgument(format!(
                "checkpoint tensor {name}.b has dimension {} (expected {h})",
                gate.b.dim()
            )));
        }
    }
    check("class_head.w", &doc.params.class_head.w, n, h)?;
    if doc.params.class_head.b.dim() != n {
        return Err(Error::InvalidArgument(format!(
            "checkpoint tensor class_head.b has dimension {} (expected {n})",
            doc.params.class_head.b.dim()
        )));
    }
    if let Some(f) = &doc.params.future_head {
        check("future_head.w", &f.w, h, h)?;
        if f.b.dim() != h {
            return Err(Error::InvalidArgument(format!(
                "checkpoint tensor future_head.b has dimension {} (expected {h})",
                f.b.dim()
            )));
        }
    }
    Ok(RecurrentModel {
        input_dim: e,
        hidden_dim: h,
        num_classes: n,
        params: doc.params,
    })
}
