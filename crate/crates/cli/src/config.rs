//! Run configuration: one JSON document per run, CLI flags and
//! `--override` pairs layered on top, defaults filling everything else.
//!
//! The merge order is fixed: defaults built from the effective seed,
//! then the config file, then `--override` pairs, then `--seed`/`--out`.
//! Explicit values always win, so a stage can pin its own seed while the
//! top-level seed feeds every stage that does not.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use earlyrec_core::encoder::{FinetuneMode, SampleConfig};
use earlyrec_core::losses::FutureLossKind;
use earlyrec_core::synth::GeneratorSpec;
use earlyrec_core::trainer::{DeltaSpec, EncoderTrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::invalid;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub evaluate: EvaluateConfig,
    pub gradcheck: GradcheckConfig,
    pub ablate: AblateConfig,
    pub plot: PlotConfig,
}

/// Where sequences come from: an existing dataset file when `path` is
/// set, otherwise the generator below.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: Option<PathBuf>,
    pub generator: GeneratorSpec,
    pub per_class: PerClass,
}

/// Sequence count per class: one number for all classes or an explicit
/// per-class list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerClass {
    Same(usize),
    Counts(Vec<usize>),
}

impl PerClass {
    pub fn counts(&self, num_classes: usize) -> Vec<usize> {
        match self {
            PerClass::Same(n) => vec![*n; num_classes],
            PerClass::Counts(c) => c.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Load this checkpoint instead of fine-tuning in process.
    pub path: Option<PathBuf>,
    pub mode: FinetuneMode,
    pub train: EncoderTrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    /// Load this checkpoint instead of training in process.
    pub path: Option<PathBuf>,
    pub hidden_dim: usize,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    /// The frozen teacher the student regresses toward. Required by
    /// `train-fsp` and `ablate`; there is no in-process fallback.
    pub teacher_path: Option<PathBuf>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub model_path: Option<PathBuf>,
    /// Strictly increasing step indices; default is 7 evenly spaced
    /// points up to the shortest test sequence.
    pub checkpoints: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Random instances per checked surface.
    pub instances: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub deltas: Vec<DeltaSpec>,
    pub lambdas: Vec<f64>,
    pub future_losses: Vec<FutureLossKind>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotConfig {
    pub curves: Vec<CurveSpec>,
    pub title: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSpec {
    pub path: PathBuf,
    /// Legend label; the file stem when empty.
    #[serde(default)]
    pub label: String,
}

impl RunConfig {
    /// The full default configuration with `seed` fed to every
    /// stochastic component.
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            out_dir: PathBuf::from("run"),
            dataset: DatasetConfig {
                path: None,
                generator: GeneratorSpec { seed, ..GeneratorSpec::default() },
                per_class: PerClass::Same(10),
            },
            encoder: EncoderConfig {
                path: None,
                mode: FinetuneMode::WeightedSubvideo,
                train: EncoderTrainConfig {
                    learning_rate: 1e-3,
                    epochs: 60,
                    embedding_dim: 32,
                    sample: SampleConfig { segment_len: 10, per_segment: 2 },
                    ..EncoderTrainConfig::subvideo_defaults(seed)
                },
            },
            teacher: TeacherConfig {
                path: None,
                hidden_dim: 48,
                train: TrainConfig::lstm_defaults(seed),
            },
            student: StudentConfig {
                teacher_path: None,
                train: TrainConfig::fsp_defaults(seed),
            },
            evaluate: EvaluateConfig { model_path: None, checkpoints: None },
            gradcheck: GradcheckConfig { instances: 20 },
            ablate: AblateConfig {
                deltas: vec![DeltaSpec::Fraction(0.2), DeltaSpec::FixedSteps(10)],
                lambdas: vec![10.0, 100.0],
                future_losses: vec![FutureLossKind::SmoothL1],
            },
            plot: PlotConfig { curves: Vec::new(), title: String::from("Accuracy vs elapsed steps") },
        }
    }
}

/// Parse the config file, apply `--override` pairs, then resolve the
/// effective seed and flag overrides. Returns the fully materialized
/// configuration (every default spelled out).
pub fn load_config(
    path: &Path,
    seed_flag: Option<u64>,
    out_flag: Option<&Path>,
    overrides: &[String],
) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| invalid(format!("config file {}: {e}", path.display())))?;
    let mut user: Value = serde_json::from_str(&text)
        .map_err(|e| invalid(format!("config file {}: {e}", path.display())))?;
    if !user.is_object() {
        return Err(invalid(format!("config file {}: top level must be a JSON object", path.display())));
    }
    for pair in overrides {
        apply_override(&mut user, pair)?;
    }

    let seed = match seed_flag {
        Some(s) => s,
        None => match user.get("seed") {
            None => 42,
            Some(v) => v
                .as_u64()
                .ok_or_else(|| invalid(format!("config key seed: expected an unsigned integer, got {v}")))?,
        },
    };
    user["seed"] = Value::from(seed);

    let mut merged = serde_json::to_value(RunConfig::with_seed(seed)).expect("defaults serialize");
    deep_merge(&mut merged, user);

    let mut cfg: RunConfig = serde_path_to_error::deserialize(merged)
        .map_err(|e| invalid(format!("config key {}: {}", e.path(), e.inner())))?;
    if let Some(out) = out_flag {
        cfg.out_dir = out.to_path_buf();
    }

    let counts = cfg.dataset.per_class.counts(cfg.dataset.generator.num_classes);
    if counts.len() != cfg.dataset.generator.num_classes {
        return Err(invalid(format!(
            "config key dataset.per_class: {} entries for {} classes",
            counts.len(),
            cfg.dataset.generator.num_classes
        )));
    }
    Ok(cfg)
}

/// `key=value` with a dotted key path; the value is parsed as JSON when
/// possible and kept as a string otherwise, so `--override seed=7` and
/// `--override encoder.mode=single_frame` both do the expected thing.
fn apply_override(root: &mut Value, pair: &str) -> Result<()> {
    let (key, raw) = pair
        .split_once('=')
        .ok_or_else(|| invalid(format!("override {pair:?} is not of the form key=value")))?;
    if key.is_empty() {
        return Err(invalid(format!("override {pair:?} has an empty key")));
    }
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));

    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| invalid(format!("override key {key}: {part} is not an object")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let last = parts[parts.len() - 1];
    let obj = node
        .as_object_mut()
        .ok_or_else(|| invalid(format!("override key {key}: parent of {last} is not an object")))?;
    obj.insert(last.to_string(), value);
    Ok(())
}

/// Objects merge key by key; any other user value replaces the default
/// wholesale (arrays included — partial array patches are not a thing).
fn deep_merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// The canonical serialized form of the effective config; its SHA-256 is
/// the manifest's `config_sha256`.
pub fn config_bytes(cfg: &RunConfig) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(cfg).expect("config serializes");
    bytes.push(b'\n');
    bytes
}

pub fn write_effective_config(cfg: &RunConfig, path: &Path) -> Result<Vec<u8>> {
    let bytes = config_bytes(cfg);
    std::fs::write(path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(bytes)
}
