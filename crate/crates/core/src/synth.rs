//! Synthetic procedure-like sequences. Every sequence walks through a
//! shared opening phase (identical emission centroid for all classes, so
//! the opening carries no class information by construction), then a
//! series of class-specific phases whose discriminative offsets grow with
//! phase index: late phases separate classes strongly, early phases only
//! weakly. Frames are the phase centroid plus isotropic Gaussian noise,
//! occasionally replaced by a far-away "irrelevant" centroid.
//!
//! All randomness is drawn from per-sequence substreams keyed on
//! (seed, sequence index), so regenerating a dataset is reproducible
//! regardless of iteration order.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{indexed_substream, substream};
use crate::tensor::Vector;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Relative magnitude of the class-discriminative centroid offset in the
/// first and last class-specific phase; intermediate phases interpolate
/// linearly. The ramp encodes that late phases are the most telling part
/// of a sequence, which is what makes early recognition hard.
const PHASE_CONTRAST_RAMP: (f64, f64) = (0.15, 1.0);

/// Magnitude of the class-independent "backbone" component of each phase
/// centroid, relative to `class_centroid_scale`.
const BACKBONE_SCALE: f64 = 0.6;

/// Magnitude of the irrelevant-frame centroid, relative to
/// `class_centroid_scale`. Larger than any inter-class distance so these
/// frames sit far from all class content.
const IRRELEVANT_SCALE: f64 = 2.5;

/// Log-normal duration distribution for one class, in steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationDist {
    pub mean: f64,
    pub std: f64,
}

/// Everything that determines a generated dataset, other than how many
/// sequences to draw. Echoed verbatim into saved dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Class-specific phases following the shared prefix.
    pub phases_per_class: usize,
    /// Inclusive range the shared prefix length is drawn from.
    pub shared_prefix_len_range: (usize, usize),
    /// Inclusive range nominal phase lengths are drawn from; actual phase
    /// lengths are these rescaled to fill the drawn duration.
    pub phase_len_range: (usize, usize),
    pub class_centroid_scale: f64,
    pub noise_std: f64,
    /// Probability that a frame is replaced by the irrelevant centroid.
    pub irrelevant_frame_prob: f64,
    /// Per-class duration distributions; one entry per class.
    pub length_jitter: Vec<DurationDist>,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        let num_classes = 9;
        GeneratorSpec {
            num_classes,
            feature_dim: 32,
            phases_per_class: 3,
            shared_prefix_len_range: (4, 8),
            phase_len_range: (8, 18),
            class_centroid_scale: 12.0,
            noise_std: 1.0,
            irrelevant_frame_prob: 0.03,
            // Duration means spread across classes so class length
            // distributions overlap but are not identical.
            length_jitter: (0..num_classes)
                .map(|k| DurationDist { mean: 46.0 + 4.0 * k as f64, std: 7.0 })
                .collect(),
            seed: 42,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be >= 2".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidArgument("feature_dim must be >= 1".into()));
        }
        if self.phases_per_class == 0 {
            return Err(Error::InvalidArgument("phases_per_class must be >= 1".into()));
        }
        if self.shared_prefix_len_range.0 > self.shared_prefix_len_range.1 {
            return Err(Error::InvalidArgument(
                "shared_prefix_len_range must be (lo, hi) with lo <= hi".into(),
            ));
        }
        if self.phase_len_range.0 == 0 || self.phase_len_range.0 > self.phase_len_range.1 {
            return Err(Error::InvalidArgument(
                "phase_len_range must be (lo, hi) with 1 <= lo <= hi".into(),
            ));
        }
        if !(self.class_centroid_scale > 0.0) {
            return Err(Error::InvalidArgument("class_centroid_scale must be > 0".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidArgument("noise_std must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.irrelevant_frame_prob) {
            return Err(Error::InvalidArgument(
                "irrelevant_frame_prob must lie in [0, 1)".into(),
            ));
        }
        if self.length_jitter.len() != self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "length_jitter has {} entries for {} classes",
                self.length_jitter.len(),
                self.num_classes
            )));
        }
        for (k, d) in self.length_jitter.iter().enumerate() {
            if !(d.mean > 0.0) || !(d.std > 0.0) || !d.mean.is_finite() || !d.std.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "length_jitter[{k}] needs positive finite mean and std"
                )));
            }
        }
        Ok(())
    }

    /// Shortest sequence the generator can emit: prefix minimum plus one
    /// step per phase.
    pub fn min_sequence_len(&self) -> usize {
        self.shared_prefix_len_range.0 + self.phases_per_class
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One generated sequence: a class label and T frames of D features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSequence {
    pub label: usize,
    pub frames: Vec<Vector>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// A generated dataset: sequences plus their split assignment, aligned by
/// index, and the spec that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: GeneratorSpec,
    pub sequences: Vec<FrameSequence>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_sequences(&self, split: Split) -> Vec<&FrameSequence> {
        self.split_indices(split).into_iter().map(|i| &self.sequences[i]).collect()
    }

    /// Length of the shortest sequence in a split, if the split is
    /// non-empty.
    pub fn min_len(&self, split: Split) -> Option<usize> {
        self.split_sequences(split).iter().map(|s| s.len()).min()
    }
}

/// Emission centroids derived deterministically from a spec. Directions
/// are orthonormalized while the feature dimension allows, which pins the
/// inter-centroid geometry instead of leaving it to chance.
#[derive(Debug, Clone)]
pub struct Centroids {
    pub prefix: Vector,
    /// `phases[class][phase]`.
    pub phases: Vec<Vec<Vector>>,
    pub irrelevant: Vector,
}

impl Centroids {
    pub fn for_spec(spec: &GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.feature_dim;
        let p = spec.phases_per_class;
        let n = spec.num_classes;
        let mut rng = substream(spec.seed, "centroids");

        // Draw directions in a fixed order: prefix, per-phase backbones,
        // irrelevant, then per-(class, phase) offsets.
        let mut directions = OrthoSampler::new(d);
        let prefix_dir = directions.next(&mut rng);
        let backbone_dirs: Vec<Vector> = (0..p).map(|_| directions.next(&mut rng)).collect();
        let irrelevant_dir = directions.next(&mut rng);
        let offset_dirs: Vec<Vec<Vector>> = (0..n)
            .map(|_| (0..p).map(|_| directions.next(&mut rng)).collect())
            .collect();

        let s = spec.class_centroid_scale;
        let mut prefix = prefix_dir;
        scale_in_place(&mut prefix, BACKBONE_SCALE * s);
        let mut irrelevant = irrelevant_dir;
        scale_in_place(&mut irrelevant, IRRELEVANT_SCALE * s);

        let (ramp_lo, ramp_hi) = PHASE_CONTRAST_RAMP;
        let phases = (0..n)
            .map(|k| {
                (0..p)
                    .map(|ph| {
                        let ramp = if p == 1 {
                            ramp_hi
                        } else {
                            ramp_lo + (ramp_hi - ramp_lo) * ph as f64 / (p - 1) as f64
                        };
                        let mut c = backbone_dirs[ph].clone();
                        scale_in_place(&mut c, BACKBONE_SCALE * s);
                        c.axpy(ramp * s, &offset_dirs[k][ph]).expect("dims match");
                        c
                    })
                    .collect()
            })
            .collect();

        Ok(Centroids { prefix, phases, irrelevant })
    }

    /// Nearest-centroid classification of a single frame, considering the
    /// shared prefix centroid and every class-phase centroid. The prefix
    /// centroid belongs to all classes at once, so a frame landing nearest
    /// to it resolves to the lowest class index, the same tie rule the
    /// evaluator uses for probabilities.
    pub fn nearest_class(&self, frame: &Vector) -> usize {
        let mut best_class = 0;
        let mut best_dist = dist2(frame, &self.prefix);
        for (k, phase_centroids) in self.phases.iter().enumerate() {
            for c in phase_centroids {
                let d = dist2(frame, c);
                if d < best_dist {
                    best_dist = d;
                    best_class = k;
                }
            }
        }
        best_class
    }
}

fn dist2(a: &Vector, b: &Vector) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

fn scale_in_place(v: &mut Vector, s: f64) {
    for x in v.as_mut_slice() {
        *x *= s;
    }
}

/// Draws unit directions, Gram-Schmidt-orthogonalized against all
/// previous draws while the dimension allows; afterwards plain normalized
/// Gaussian directions.
struct OrthoSampler {
    dim: usize,
    basis: Vec<Vector>,
}

impl OrthoSampler {
    fn new(dim: usize) -> Self {
        OrthoSampler { dim, basis: Vec::new() }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> Vector {
        loop {
            let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(rng)).collect();
            if self.basis.len() < self.dim {
                for b in &self.basis {
                    let proj: f64 =
                        v.iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
                    for (x, y) in v.iter_mut().zip(b.as_slice()) {
                        *x -= proj * y;
                    }
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                for x in &mut v {
                    *x /= norm;
                }
                let u = Vector::new(v).expect("normalized direction is finite");
                if self.basis.len() < self.dim {
                    self.basis.push(u.clone());
                }
                return u;
            }
        }
    }
}

/// Generate one sequence of the given class. The caller supplies the
/// centroids (derive them once via [`Centroids::for_spec`]) and the
/// per-sequence RNG substream.
pub fn generate_sequence(
    spec: &GeneratorSpec,
    centroids: &Centroids,
    class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FrameSequence> {
    spec.validate()?;
    if class >= spec.num_classes {
        return Err(Error::InvalidArgument(format!(
            "class {} out of range for {} classes",
            class, spec.num_classes
        )));
    }

    let prefix_len =
        rng.gen_range(spec.shared_prefix_len_range.0..=spec.shared_prefix_len_range.1);

    // Duration from the class's log-normal law, clamped to the structural
    // minimum so every phase gets at least one step.
    let dist = spec.length_jitter[class];
    let sigma2 = (1.0 + (dist.std / dist.mean).powi(2)).ln();
    let mu = dist.mean.ln() - sigma2 / 2.0;
    let log_normal = LogNormal::new(mu, sigma2.sqrt())
        .map_err(|e| Error::InvalidArgument(format!("duration distribution: {e}")))?;
    let drawn: f64 = log_normal.sample(rng);
    let min_len = prefix_len + spec.phases_per_class;
    let total_len = (drawn.round() as i64).max(min_len as i64) as usize;

    // Nominal phase lengths rescaled to fill what the duration leaves
    // after the prefix.
    let p = spec.phases_per_class;
    let nominal: Vec<f64> = (0..p)
        .map(|_| rng.gen_range(spec.phase_len_range.0..=spec.phase_len_range.1) as f64)
        .collect();
    let nominal_sum: f64 = nominal.iter().sum();
    let budget = total_len - prefix_len;
    let mut phase_lens: Vec<usize> = nominal
        .iter()
        .map(|n| ((n / nominal_sum * budget as f64).round() as usize).max(1))
        .collect();
    let mut assigned: usize = phase_lens.iter().sum();
    // Rounding drift: grow or shrink phases round-robin, never below one
    // step.
    let mut i = 0;
    while assigned != budget {
        if assigned < budget {
            phase_lens[i % p] += 1;
            assigned += 1;
        } else if phase_lens[i % p] > 1 {
            phase_lens[i % p] -= 1;
            assigned -= 1;
        }
        i += 1;
    }

    let d = spec.feature_dim;
    let mut frames = Vec::with_capacity(total_len);
    let emit = |centroid: &Vector, rng: &mut ChaCha8Rng| -> Result<Vector> {
        let mut frame = Vec::with_capacity(d);
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(rng);
            frame.push(centroid[j] + spec.noise_std * noise);
        }
        Vector::new(frame)
    };

    for step in 0..total_len {
        let phase_centroid = if step < prefix_len {
            &centroids.prefix
        } else {
            let mut rel = step - prefix_len;
            let mut ph = 0;
            while ph + 1 < p && rel >= phase_lens[ph] {
                rel -= phase_lens[ph];
                ph += 1;
            }
            &centroids.phases[class][ph]
        };
        let centroid = if rng.gen::<f64>() < spec.irrelevant_frame_prob {
            &centroids.irrelevant
        } else {
            phase_centroid
        };
        frames.push(emit(centroid, rng)?);
    }

    Ok(FrameSequence { label: class, frames })
}

/// Generate a dataset with the given number of sequences per class and a
/// stratified 60/10/30 train/val/test split. Each class must contribute
/// at least 3 sequences so it can appear in every split.
pub fn generate_dataset(spec: &GeneratorSpec, per_class_counts: &[usize]) -> Result<Dataset> {
    spec.validate()?;
    if per_class_counts.len() != spec.num_classes {
        return Err(Error::InvalidArgument(format!(
            "per_class_counts has {} entries for {} classes",
            per_class_counts.len(),
            spec.num_classes
        )));
    }
    if let Some((k, _)) = per_class_counts.iter().enumerate().find(|(_, c)| **c < 3) {
        return Err(Error::InvalidArgument(format!(
            "class {k} has fewer than 3 sequences; cannot cover train/val/test"
        )));
    }

    let centroids = Centroids::for_spec(spec)?;
    let mut sequences = Vec::new();
    let mut splits = Vec::new();
    let mut global_index: u64 = 0;

    for (class, &count) in per_class_counts.iter().enumerate() {
        // Per-class split sizes: floor the train and val fractions, give
        // the remainder to test, and keep every split non-empty.
        let n_train = ((count as f64 * 0.6).floor() as usize).max(1);
        let n_val = ((count as f64 * 0.1).floor() as usize).max(1);
        let n_test = count - n_train - n_val;
        debug_assert!(n_test >= 1);

        let mut order: Vec<usize> = (0..count).collect();
        let mut split_rng = indexed_substream(spec.seed, "split", class as u64);
        for i in (1..order.len()).rev() {
            let j = split_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut assignment = vec![Split::Test; count];
        for (rank, &slot) in order.iter().enumerate() {
            assignment[slot] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }

        for within_class in 0..count {
            let mut rng = indexed_substream(spec.seed, "sequence", global_index);
            sequences.push(generate_sequence(spec, &centroids, class, &mut rng)?);
            splits.push(assignment[within_class]);
            global_index += 1;
        }
    }

    Ok(Dataset { spec: spec.clone(), sequences, splits })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    version: u32,
    num_classes: usize,
    feature_dim: usize,
    spec: GeneratorSpec,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetRecord {
    label: usize,
    split: Split,
    features: Vec<Vector>,
}

/// Write a dataset as newline-delimited JSON: a header line, then one
/// line per sequence. JSON floats use shortest-roundtrip formatting, so
/// loading reproduces every f64 bit for bit.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    let header = DatasetHeader {
        version: DATASET_FORMAT_VERSION,
        num_classes: dataset.spec.num_classes,
        feature_dim: dataset.spec.feature_dim,
        spec: dataset.spec.clone(),
    };
    serde_json::to_writer(&mut out, &header)
        .map_err(|e| Error::InvalidArgument(format!("serializing dataset header: {e}")))?;
    out.push(b'\n');
    for (seq, split) in dataset.sequences.iter().zip(&dataset.splits) {
        let record = DatasetRecord {
            label: seq.label,
            split: *split,
            features: seq.frames.clone(),
        };
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| Error::InvalidArgument(format!("serializing dataset record: {e}")))?;
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load a dataset written by [`save_dataset`]. The whole file is parsed
/// and validated before anything is returned; errors name the offending
/// line or record.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let header: DatasetHeader = match lines.next() {
        Some((_, Ok(line))) => serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: 1, message: format!("dataset header: {e}") })?,
        Some((_, Err(e))) => {
            return Err(Error::Parse { line: 1, message: format!("reading header: {e}") })
        }
        None => return Err(Error::Parse { line: 1, message: "empty dataset file".into() }),
    };
    if header.version != DATASET_FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "unsupported dataset version {} (expected {})",
                header.version, DATASET_FORMAT_VERSION
            ),
        });
    }

    let mut sequences = Vec::new();
    let mut splits = Vec::new();
    for (line_idx, line) in lines {
        let line_no = line_idx + 1;
        let record_idx = sequences.len();
        let line = line
            .map_err(|e| Error::Parse { line: line_no, message: format!("reading record: {e}") })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: line_no, message: format!("dataset record: {e}") })?;
        if record.label >= header.num_classes {
            return Err(Error::Format {
                index: record_idx,
                message: format!(
                    "label {} out of range for {} classes",
                    record.label, header.num_classes
                ),
            });
        }
        if record.features.is_empty() {
            return Err(Error::Format { index: record_idx, message: "empty sequence".into() });
        }
        for (t, frame) in record.features.iter().enumerate() {
            if frame.dim() != header.feature_dim {
                return Err(Error::Format {
                    index: record_idx,
                    message: format!(
                        "frame {} has dimension {} (expected {})",
                        t,
                        frame.dim(),
                        header.feature_dim
                    ),
                });
            }
        }
        sequences.push(FrameSequence { label: record.label, frames: record.features });
        splits.push(record.split);
    }

    Ok(Dataset { spec: header.spec, sequences, splits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> GeneratorSpec {
        GeneratorSpec {
            num_classes: 3,
            feature_dim: 8,
            phases_per_class: 2,
            shared_prefix_len_range: (2, 4),
            phase_len_range: (3, 6),
            class_centroid_scale: 10.0,
            noise_std: 1.0,
            irrelevant_frame_prob: 0.05,
            length_jitter: vec![
                DurationDist { mean: 16.0, std: 3.0 },
                DurationDist { mean: 18.0, std: 3.0 },
                DurationDist { mean: 20.0, std: 3.0 },
            ],
            seed: 7,
        }
    }

    #[test]
    fn default_spec_validates() {
        GeneratorSpec::default().validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut s = small_spec();
        s.num_classes = 1;
        assert!(s.validate().is_err());

        let mut s = small_spec();
        s.irrelevant_frame_prob = 1.0;
        assert!(s.validate().is_err());

        let mut s = small_spec();
        s.length_jitter.pop();
        assert!(s.validate().is_err());

        let mut s = small_spec();
        s.phase_len_range = (0, 3);
        assert!(s.validate().is_err());
    }

    #[test]
    fn sequence_has_structural_minimum_length() {
        let spec = small_spec();
        let centroids = Centroids::for_spec(&spec).unwrap();
        for i in 0..50 {
            let mut rng = indexed_substream(spec.seed, "sequence", i);
            let seq = generate_sequence(&spec, &centroids, (i % 3) as usize, &mut rng).unwrap();
            assert!(seq.len() >= spec.min_sequence_len());
            assert!(seq.frames.iter().all(|f| f.dim() == spec.feature_dim));
        }
    }

    #[test]
    fn generation_is_deterministic_per_index() {
        let spec = small_spec();
        let centroids = Centroids::for_spec(&spec).unwrap();
        let mut a = indexed_substream(spec.seed, "sequence", 5);
        let mut b = indexed_substream(spec.seed, "sequence", 5);
        let s1 = generate_sequence(&spec, &centroids, 1, &mut a).unwrap();
        let s2 = generate_sequence(&spec, &centroids, 1, &mut b).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn duration_statistics_match_configuration() {
        let mut spec = small_spec();
        spec.length_jitter = vec![DurationDist { mean: 60.0, std: 10.0 }; 3];
        let centroids = Centroids::for_spec(&spec).unwrap();
        let mut lens = Vec::new();
        for i in 0..200 {
            let mut rng = indexed_substream(spec.seed, "duration-test", i);
            let seq = generate_sequence(&spec, &centroids, 0, &mut rng).unwrap();
            lens.push(seq.len() as f64);
        }
        let mean = lens.iter().sum::<f64>() / lens.len() as f64;
        let var = lens.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>()
            / (lens.len() - 1) as f64;
        let std = var.sqrt();
        assert!((mean - 60.0).abs() < 60.0 * 0.2, "mean {mean}");
        assert!((std - 10.0).abs() < 10.0 * 0.2, "std {std}");
    }

    // The opening phase is identical across classes by construction, so a
    // nearest-centroid oracle restricted to prefix frames cannot beat
    // chance; the same oracle on final-phase frames is nearly perfect.
    #[test]
    fn oracle_chance_on_prefix_and_strong_on_final_phase() {
        let spec = GeneratorSpec::default();
        assert_eq!(spec.seed, 42);
        let centroids = Centroids::for_spec(&spec).unwrap();
        let n = spec.num_classes;

        let mut prefix_total = 0usize;
        let mut prefix_correct = 0usize;
        let mut final_total = 0usize;
        let mut final_correct = 0usize;
        for i in 0..(n as u64 * 10) {
            let class = (i as usize) % n;
            let mut rng = indexed_substream(spec.seed, "sequence", i);
            let seq = generate_sequence(&spec, &centroids, class, &mut rng).unwrap();
            let t = seq.len();
            // Frames surely inside the prefix and surely in the final
            // phase, using the structural bounds.
            for step in 0..spec.shared_prefix_len_range.0 {
                prefix_total += 1;
                if centroids.nearest_class(&seq.frames[step]) == class {
                    prefix_correct += 1;
                }
            }
            for step in (t - 3)..t {
                final_total += 1;
                if centroids.nearest_class(&seq.frames[step]) == class {
                    final_correct += 1;
                }
            }
        }
        let prefix_acc = prefix_correct as f64 / prefix_total as f64;
        let final_acc = final_correct as f64 / final_total as f64;
        assert!(
            prefix_acc <= 1.0 / n as f64 + 0.05,
            "prefix oracle accuracy {prefix_acc} above chance band"
        );
        assert!(final_acc >= 0.9, "final phase oracle accuracy {final_acc}");
    }

    #[test]
    fn stratified_split_counts() {
        let spec = GeneratorSpec::default();
        let ds = generate_dataset(&spec, &[10; 9]).unwrap();
        assert_eq!(ds.sequences.len(), 90);
        assert_eq!(ds.split_indices(Split::Train).len(), 54);
        assert_eq!(ds.split_indices(Split::Val).len(), 9);
        assert_eq!(ds.split_indices(Split::Test).len(), 27);
        // Stratification: every class in every split.
        for split in [Split::Train, Split::Val, Split::Test] {
            let mut seen = vec![false; 9];
            for seq in ds.split_sequences(split) {
                seen[seq.label] = true;
            }
            assert!(seen.iter().all(|s| *s), "{split} split misses a class");
        }
    }

    // Class imbalance in the style of a 25-vs-50 pair of classes: the
    // split keeps per-class ratios close to 60/10/30.
    #[test]
    fn imbalanced_split_preserves_ratios() {
        let mut spec = small_spec();
        spec.num_classes = 2;
        spec.length_jitter.truncate(2);
        let ds = generate_dataset(&spec, &[25, 50]).unwrap();
        for (class, count) in [(0usize, 25usize), (1, 50)] {
            let of_class = |split: Split| {
                ds.split_sequences(split).iter().filter(|s| s.label == class).count()
            };
            let train = of_class(Split::Train) as f64 / count as f64;
            let val = of_class(Split::Val) as f64 / count as f64;
            let test = of_class(Split::Test) as f64 / count as f64;
            assert!((train - 0.6).abs() <= 1.0 / count as f64 + 1e-9, "train ratio {train}");
            assert!((val - 0.1).abs() <= 1.0 / count as f64 + 1e-9, "val ratio {val}");
            assert!((test - 0.3).abs() <= 2.0 / count as f64 + 1e-9, "test ratio {test}");
        }
    }

    #[test]
    fn per_class_count_of_two_is_rejected() {
        let spec = small_spec();
        let err = generate_dataset(&spec, &[2, 10, 10]).unwrap_err();
        assert!(err.to_string().contains("class 0"));
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let spec = small_spec();
        let ds = generate_dataset(&spec, &[4, 4, 4]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.ndjson");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds.splits, loaded.splits);
        assert_eq!(ds.spec, loaded.spec);
        assert_eq!(ds.sequences.len(), loaded.sequences.len());
        for (a, b) in ds.sequences.iter().zip(&loaded.sequences) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.frames.len(), b.frames.len());
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                for (x, y) in fa.as_slice().iter().zip(fb.as_slice()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn truncated_file_names_the_line() {
        let spec = small_spec();
        let ds = generate_dataset(&spec, &[4, 4, 4]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.ndjson");
        save_dataset(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let broken = format!("{}\n{}\n{}", lines[0], lines[1], &lines[2][..lines[2].len() / 2]);
        std::fs::write(&path, broken).unwrap();
        let err = load_dataset(&path).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_label_names_the_record() {
        let spec = small_spec();
        let ds = generate_dataset(&spec, &[4, 4, 4]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.ndjson");
        save_dataset(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let bumped = text.replacen("{\"label\":0", "{\"label\":99", 1);
        assert_ne!(text, bumped);
        std::fs::write(&path, bumped).unwrap();
        let err = load_dataset(&path).unwrap_err();
        match err {
            Error::Format { index, .. } => assert_eq!(index, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
