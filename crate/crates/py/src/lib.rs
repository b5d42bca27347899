//! Python bindings: the pipeline's main types and operations behind a
//! thin JSON-config surface. Configs travel as JSON strings so Python
//! callers tweak dicts and the Rust side keeps one source of truth for
//! defaults and validation.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use earlyrec_core::encoder::{
    early_weight, extract_features, load_encoder, save_encoder, EncoderModel, FinetuneMode,
};
use earlyrec_core::error::Error as CoreError;
use earlyrec_core::evaluator::{default_checkpoints, evaluate as evaluate_core};
use earlyrec_core::losses::{average_ce, false_positive_weight, linear_weighted_ce};
use earlyrec_core::recurrent::{
    backward_sequence, forward_sequence, load_model, save_model, RecurrentModel,
};
use earlyrec_core::synth::{
    generate_dataset, load_dataset, save_dataset, Dataset as CoreDataset, GeneratorSpec, Split,
};
use earlyrec_core::tensor::Vector;
use earlyrec_core::trainer::{
    finetune_encoder, gradient_check, train_fsp, train_teacher, EncoderTrainConfig, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn core_err(e: CoreError) -> PyErr {
    match &e {
        CoreError::Io { .. } => PyIOError::new_err(e.to_string()),
        CoreError::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(what: &str, json: &str) -> PyResult<T> {
    serde_json::from_str(json).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn parse_split(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(PyValueError::new_err(format!(
            "unknown split {other:?}; expected train, val, or test"
        ))),
    }
}

fn parse_mode(name: &str) -> PyResult<FinetuneMode> {
    match name {
        "single_frame" => Ok(FinetuneMode::SingleFrame),
        "unweighted_subvideo" => Ok(FinetuneMode::UnweightedSubvideo),
        "weighted_subvideo" => Ok(FinetuneMode::WeightedSubvideo),
        other => Err(PyValueError::new_err(format!(
            "unknown finetune mode {other:?}; expected single_frame, unweighted_subvideo, or weighted_subvideo"
        ))),
    }
}

/// A generated dataset: labeled frame sequences with a train/val/test
/// assignment.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: CoreDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyDataset { inner: load_dataset(path.as_ref()).map_err(core_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_dataset(&self.inner, path.as_ref()).map_err(core_err)
    }

    fn __len__(&self) -> usize {
        self.inner.sequences.len()
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    fn split_len(&self, split: &str) -> PyResult<usize> {
        Ok(self.inner.split_indices(parse_split(split)?).len())
    }

    fn min_len(&self, split: &str) -> PyResult<Option<usize>> {
        Ok(self.inner.min_len(parse_split(split)?))
    }

    fn label(&self, index: usize) -> PyResult<usize> {
        self.inner
            .sequences
            .get(index)
            .map(|s| s.label)
            .ok_or_else(|| PyValueError::new_err(format!("sequence index {index} out of range")))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} sequences, {} classes, feature_dim {})",
            self.inner.sequences.len(),
            self.inner.num_classes(),
            self.inner.feature_dim()
        )
    }
}

/// The frame encoder: embeds raw frames; features for the recurrent
/// models come from here.
#[pyclass(name = "Encoder")]
struct PyEncoder {
    inner: EncoderModel,
}

#[pymethods]
impl PyEncoder {
    #[staticmethod]
    fn finetune(dataset: &PyDataset, mode: &str, config_json: &str) -> PyResult<Self> {
        let cfg: EncoderTrainConfig = parse_json("encoder config", config_json)?;
        let outcome = finetune_encoder(&dataset.inner, parse_mode(mode)?, &cfg).map_err(core_err)?;
        Ok(PyEncoder { inner: outcome.model })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyEncoder { inner: load_encoder(path.as_ref()).map_err(core_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_encoder(&self.inner, path.as_ref()).map_err(core_err)
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.embedding_dim
    }

    /// Frozen-encoder features for one sequence: a T x embedding_dim list.
    fn embed_sequence(&self, dataset: &PyDataset, index: usize) -> PyResult<Vec<Vec<f64>>> {
        let seq = dataset
            .inner
            .sequences
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("sequence index {index} out of range")))?;
        let feats = extract_features(&self.inner, seq).map_err(core_err)?;
        Ok(feats.into_iter().map(|v| v.as_slice().to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Encoder(feature_dim {}, embedding_dim {}, {} classes)",
            self.inner.feature_dim, self.inner.embedding_dim, self.inner.num_classes
        )
    }
}

/// A recurrent classifier; a student additionally predicts the teacher's
/// future hidden state during training.
#[pyclass(name = "Model")]
struct PyModel {
    inner: RecurrentModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn train_teacher(
        dataset: &PyDataset,
        encoder: &PyEncoder,
        hidden_dim: usize,
        config_json: &str,
    ) -> PyResult<Self> {
        let cfg: TrainConfig = parse_json("train config", config_json)?;
        let outcome =
            train_teacher(&dataset.inner, &encoder.inner, hidden_dim, &cfg).map_err(core_err)?;
        Ok(PyModel { inner: outcome.model })
    }

    #[staticmethod]
    fn train_fsp(
        dataset: &PyDataset,
        encoder: &PyEncoder,
        teacher: &PyModel,
        config_json: &str,
    ) -> PyResult<Self> {
        let cfg: TrainConfig = parse_json("train config", config_json)?;
        let outcome =
            train_fsp(&dataset.inner, &encoder.inner, &teacher.inner, &cfg).map_err(core_err)?;
        Ok(PyModel { inner: outcome.model })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel { inner: load_model(path.as_ref()).map_err(core_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(&self.inner, path.as_ref()).map_err(core_err)
    }

    #[getter]
    fn hidden_dim(&self) -> usize {
        self.inner.hidden_dim
    }

    #[getter]
    fn is_student(&self) -> bool {
        self.inner.has_future_head()
    }

    /// Class probabilities after each step of one sequence.
    fn predict_sequence(
        &self,
        encoder: &PyEncoder,
        dataset: &PyDataset,
        index: usize,
    ) -> PyResult<Vec<Vec<f64>>> {
        let seq = dataset
            .inner
            .sequences
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("sequence index {index} out of range")))?;
        let feats = extract_features(&encoder.inner, seq).map_err(core_err)?;
        let trace = forward_sequence(&self.inner, &feats).map_err(core_err)?;
        Ok(trace.probs.into_iter().map(|p| p.as_slice().to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({}, input_dim {}, hidden_dim {}, {} classes)",
            if self.inner.has_future_head() { "student" } else { "teacher" },
            self.inner.input_dim,
            self.inner.hidden_dim,
            self.inner.num_classes
        )
    }
}

/// Default generator parameters as JSON, ready to tweak and feed back
/// into `generate`.
#[pyfunction]
fn default_generator_spec() -> String {
    serde_json::to_string(&GeneratorSpec::default()).expect("spec serializes")
}

#[pyfunction]
fn encoder_defaults(seed: u64) -> String {
    serde_json::to_string(&EncoderTrainConfig::subvideo_defaults(seed)).expect("config serializes")
}

#[pyfunction]
fn teacher_defaults(seed: u64) -> String {
    serde_json::to_string(&TrainConfig::lstm_defaults(seed)).expect("config serializes")
}

#[pyfunction]
fn fsp_defaults(seed: u64) -> String {
    serde_json::to_string(&TrainConfig::fsp_defaults(seed)).expect("config serializes")
}

#[pyfunction]
fn generate(spec_json: &str, per_class: Vec<usize>) -> PyResult<PyDataset> {
    let spec: GeneratorSpec = parse_json("generator spec", spec_json)?;
    Ok(PyDataset { inner: generate_dataset(&spec, &per_class).map_err(core_err)? })
}

/// Accuracy-vs-elapsed-time report over the test split, as a JSON string
/// in the same shape `write_report` puts on disk. `checkpoints=None`
/// uses the default evenly spaced grid.
#[pyfunction]
#[pyo3(signature = (model, encoder, dataset, checkpoints=None))]
fn evaluate(
    model: &PyModel,
    encoder: &PyEncoder,
    dataset: &PyDataset,
    checkpoints: Option<Vec<usize>>,
) -> PyResult<String> {
    let test = dataset.inner.split_sequences(Split::Test);
    let grid = match checkpoints {
        Some(g) => g,
        None => {
            let shortest = dataset
                .inner
                .min_len(Split::Test)
                .ok_or_else(|| PyValueError::new_err("dataset has no test sequences"))?;
            default_checkpoints(shortest)
        }
    };
    let report = evaluate_core(&model.inner, &encoder.inner, &test, &grid).map_err(core_err)?;
    Ok(serde_json::to_string(&report).expect("report serializes"))
}

/// The sub-video pooling weight for step `t` of a length-`seq_len` clip.
#[pyfunction]
#[pyo3(name = "early_weight")]
fn early_weight_py(t: usize, seq_len: usize) -> PyResult<f64> {
    early_weight(t, seq_len).map_err(core_err)
}

/// The false-positive coefficient of the time-weighted classification
/// loss at step `t` of `seq_len`.
#[pyfunction]
#[pyo3(name = "false_positive_weight")]
fn false_positive_weight_py(t: usize, seq_len: usize) -> f64 {
    false_positive_weight(t, seq_len)
}

#[pyfunction]
#[pyo3(name = "default_checkpoints")]
fn default_checkpoints_py(shortest: usize) -> Vec<usize> {
    default_checkpoints(shortest)
}

/// Worst relative error between analytic backpropagation-through-time
/// gradients and central finite differences over random small instances.
#[pyfunction]
fn gradcheck_bptt(instances: usize, seed: u64) -> PyResult<f64> {
    if instances == 0 {
        return Err(PyValueError::new_err("instances must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let t = rng.gen_range(3..=5);
        let e = rng.gen_range(2..=4);
        let h = rng.gen_range(2..=4);
        let n = rng.gen_range(2..=3);
        let label = rng.gen_range(0..n);
        let linear = i % 2 == 1;
        let mut model = RecurrentModel::new(e, h, n, false, seed ^ (i as u64 + 1)).map_err(core_err)?;
        let features: Vec<Vector> = (0..t)
            .map(|_| Vector::new((0..e).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("non-empty"))
            .collect();
        let trace = forward_sequence(&model, &features).map_err(core_err)?;
        let d_logits = if linear {
            linear_weighted_ce(&trace.probs, label, t, t).map_err(core_err)?.1
        } else {
            average_ce(&trace.probs, label, t).map_err(core_err)?.1
        };
        let grads = backward_sequence(&model, &features, &d_logits, &[]).map_err(core_err)?;
        let report = gradient_check(&mut model, &grads, |m| {
            let trace = forward_sequence(m, &features)?;
            if linear {
                Ok(linear_weighted_ce(&trace.probs, label, t, t)?.0)
            } else {
                Ok(average_ce(&trace.probs, label, t)?.0)
            }
        })
        .map_err(core_err)?;
        worst = worst.max(report.worst);
    }
    Ok(worst)
}

#[pymodule]
fn earlyrec_py(_py: Python<'_>, m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(default_generator_spec, m)?)?;
    m.add_function(wrap_pyfunction!(encoder_defaults, m)?)?;
    m.add_function(wrap_pyfunction!(teacher_defaults, m)?)?;
    m.add_function(wrap_pyfunction!(fsp_defaults, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(early_weight_py, m)?)?;
    m.add_function(wrap_pyfunction!(false_positive_weight_py, m)?)?;
    m.add_function(wrap_pyfunction!(default_checkpoints_py, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_bptt, m)?)?;
    Ok(())
}
