//! Synthetic desk-scale audio tasks.
//!
//! Three generators produce fully in-memory datasets at a 16 kHz sample
//! rate, each with deterministic, seed-driven content:
//!
//! * **audio-class** — classify which of ten synthetic timbres (fixed
//!   harmonic amplitude profiles plus class-specific noise) produced a
//!   2048-sample clip;
//! * **pitch** — assign a 1024-sample harmonic frame to one of 60
//!   semitone-spaced pitch bins spanning five octaves;
//! * **onset** — detect percussive onsets in noise-bed tracks from 64-band
//!   log-filterbank context windows, scored by an F-measure with ±1 frame
//!   of tolerance.
//!
//! All tasks expose the same [`Dataset`] shape so the trainer and the
//! pruning engine stay task-agnostic.

pub mod audio_class;
pub mod cache;
pub mod onset;
pub mod pitch;

use crate::error::{Error, Result};
use crate::graph::{LayerSpec, OutputActivation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sample rate shared by every generator, in Hz.
pub const SAMPLE_RATE: f32 = 16_000.0;

/// FNV-1a over a byte string; the crate's stable hash for deriving seeds.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent deterministic RNG for item `index` of stream `tag`.
///
/// Hashing (seed, tag, index) gives every sample its own stream, so
/// datasets are reproducible regardless of generation order and different
/// splits can never alias each other's randomness.
pub(crate) fn stream_rng(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut key = Vec::with_capacity(16 + tag.len());
    key.extend_from_slice(&seed.to_le_bytes());
    key.extend_from_slice(tag.as_bytes());
    key.extend_from_slice(&index.to_le_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a64(&key))
}

/// Scales `buf` so its root-mean-square power is `target` (no-op on silence).
pub(crate) fn normalize_rms(buf: &mut [f32], target: f32) {
    let mut sq = 0.0f64;
    for &v in buf.iter() {
        sq += f64::from(v) * f64::from(v);
    }
    let rms = (sq / buf.len() as f64).sqrt() as f32;
    if rms > 0.0 {
        let k = target / rms;
        for v in buf.iter_mut() {
            *v *= k;
        }
    }
}

/// One-pole low-passed white noise, RMS-normalized to `rms`.
pub(crate) fn lowpass_noise(rng: &mut ChaCha8Rng, len: usize, alpha: f32, rms: f32) -> Vec<f32> {
    let mut out = Vec::with_capacity(len);
    let mut state = 0.0f32;
    for _ in 0..len {
        let w: f32 = rng.gen_range(-1.0..1.0);
        state = alpha * state + (1.0 - alpha) * w;
        out.push(state);
    }
    normalize_rms(&mut out, rms);
    out
}

/// Which task a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    AudioClass,
    Pitch,
    Onset,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::AudioClass => "audio-class",
            TaskKind::Pitch => "pitch",
            TaskKind::Onset => "onset",
        }
    }

    pub fn parse(s: &str) -> Result<TaskKind> {
        match s {
            "audio-class" => Ok(TaskKind::AudioClass),
            "pitch" => Ok(TaskKind::Pitch),
            "onset" => Ok(TaskKind::Onset),
            other => Err(Error::config(format!(
                "unknown task `{other}` (expected audio-class, pitch, or onset)"
            ))),
        }
    }

    pub fn all() -> [TaskKind; 3] {
        [TaskKind::AudioClass, TaskKind::Pitch, TaskKind::Onset]
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Ground truth for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(u32),
    Binary(f32),
}

/// Loss a task trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Binary,
}

/// Error metric a task reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Fraction of misclassified samples.
    ClassError,
    /// `1 − F` of onset detection with ±1 frame of tolerance.
    OnsetError,
}

/// One split of a dataset: `n` samples of `sample_len` floats each, stored
/// row-major. `spans` marks contiguous whole-track frame ranges (used by the
/// onset metric); it is empty for splits of independent samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub n: usize,
    pub sample_len: usize,
    pub data: Vec<f32>,
    pub targets: Vec<Target>,
    pub spans: Vec<(usize, usize)>,
}

impl Split {
    pub fn new(sample_len: usize) -> Split {
        Split {
            n: 0,
            sample_len,
            data: Vec::new(),
            targets: Vec::new(),
            spans: Vec::new(),
        }
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.data[i * self.sample_len..(i + 1) * self.sample_len]
    }

    pub fn push(&mut self, sample: &[f32], target: Target) {
        debug_assert_eq!(sample.len(), self.sample_len);
        self.data.extend_from_slice(sample);
        self.targets.push(target);
        self.n += 1;
    }

    /// Structural consistency check used by generators and the cache codec.
    pub fn check(&self) -> Result<()> {
        if self.data.len() != self.n * self.sample_len || self.targets.len() != self.n {
            return Err(Error::contract("split buffers disagree with sample count"));
        }
        for &(a, b) in &self.spans {
            if a >= b || b > self.n {
                return Err(Error::contract(format!(
                    "span ({a}, {b}) out of range for {} samples",
                    self.n
                )));
            }
        }
        Ok(())
    }
}

/// A complete dataset: three disjoint splits plus task metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub seed: u64,
    /// Model input shape per sample: `[features]` or `[channels, length]`.
    pub input_shape: Vec<usize>,
    /// Output arity: class count, or 1 for binary tasks.
    pub arity: usize,
    pub loss: LossKind,
    pub metric: Metric,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn check(&self) -> Result<()> {
        let want: usize = self.input_shape.iter().product();
        for (name, split) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            split.check()?;
            if split.n == 0 {
                return Err(Error::contract(format!("empty {name} split")));
            }
            if split.sample_len != want {
                return Err(Error::contract(format!(
                    "{name} split sample length {} does not match input shape {:?}",
                    split.sample_len, self.input_shape
                )));
            }
        }
        Ok(())
    }
}

/// Everything needed to run one task: its reference architecture, loss,
/// metric, and training length.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub input_shape: Vec<usize>,
    pub arity: usize,
    pub layers: Vec<LayerSpec>,
    pub output_activation: OutputActivation,
    pub loss: LossKind,
    pub metric: Metric,
    pub epochs: usize,
    /// Default generator size: samples per class (audio-class), total
    /// samples (pitch), or track count (onset).
    pub default_size: usize,
}

fn conv(c_out: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv1d {
        c_out,
        kernel,
        stride,
        dilation: 1,
        padding: 0,
        prunable: true,
    }
}

fn conv_dilated(c_out: usize, kernel: usize, dilation: usize) -> LayerSpec {
    LayerSpec::Conv1d {
        c_out,
        kernel,
        stride: 1,
        dilation,
        padding: 0,
        prunable: true,
    }
}

/// Reference architecture and protocol for a task.
///
/// Every prunable layer is followed by a batch norm so that all three
/// ranking criteria apply to all prunable layers.
pub fn task_spec(kind: TaskKind) -> TaskSpec {
    match kind {
        TaskKind::AudioClass => TaskSpec {
            kind,
            input_shape: vec![1, 2048],
            arity: 10,
            layers: vec![
                conv(12, 64, 32), // [12, 63]
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 }, // [12, 31]
                conv_dilated(16, 8, 2), // [16, 17]
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 }, // [16, 8]
                conv(24, 4, 1), // [24, 5]
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                conv(32, 3, 1), // [32, 3]
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 3 }, // [32, 1]
                LayerSpec::Flatten, // [32]
                LayerSpec::Dense { n_out: 64, prunable: true },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Dropout { p: 0.2 },
                LayerSpec::Dense { n_out: 48, prunable: true },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Dense { n_out: 32, prunable: true },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::OutputDense { n_out: 10 },
            ],
            output_activation: OutputActivation::Softmax,
            loss: LossKind::CrossEntropy,
            metric: Metric::ClassError,
            epochs: 60,
            default_size: 400,
        },
        TaskKind::Pitch => TaskSpec {
            kind,
            input_shape: vec![1, 1024],
            arity: 60,
            // Front end kept deliberately cheap (short non-overlapping
            // windows); almost all inference work sits in the middle
            // convolutions, whose cost shrinks on both the input and output
            // side under unit removal, while over half the parameters sit
            // in the wide dense head, which only shrinks on its input side.
            layers: vec![
                conv(14, 32, 32), // [14, 32]
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                conv(20, 8, 1), // [20, 25]
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                conv(24, 8, 1), // [24, 18]
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                conv(22, 6, 1), // [22, 13]
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Flatten, // [286]
                LayerSpec::OutputDense { n_out: 60 },
            ],
            output_activation: OutputActivation::Softmax,
            loss: LossKind::CrossEntropy,
            metric: Metric::ClassError,
            epochs: 80,
            default_size: 3000,
        },
        TaskKind::Onset => TaskSpec {
            kind,
            input_shape: vec![64, 15],
            arity: 1,
            layers: vec![
                conv(24, 3, 1), // [24, 13]
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 }, // [24, 6]
                conv(28, 3, 1), // [28, 4]
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 }, // [28, 2]
                LayerSpec::Flatten, // [56]
                LayerSpec::Dense { n_out: 48, prunable: true },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Dense { n_out: 32, prunable: true },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::OutputDense { n_out: 1 },
            ],
            output_activation: OutputActivation::Sigmoid,
            loss: LossKind::Binary,
            metric: Metric::OnsetError,
            epochs: 60,
            default_size: 120,
        },
    }
}

/// Generates a task dataset. `size` overrides the task's default scale
/// (samples per class / total samples / track count).
pub fn generate(kind: TaskKind, size: Option<usize>, seed: u64) -> Result<Dataset> {
    let spec = task_spec(kind);
    let size = size.unwrap_or(spec.default_size);
    let data = match kind {
        TaskKind::AudioClass => audio_class::generate(size, seed)?,
        TaskKind::Pitch => pitch::generate(size, seed)?,
        TaskKind::Onset => onset::generate(size, seed)?,
    };
    data.check()?;
    Ok(data)
}

/// Onset detection error: `1 − F` where F is the F-measure of predicted
/// onsets against true onsets with ±1 frame of tolerance, matched greedily
/// in time order within each span. A probability `>= 0.5` predicts an
/// onset. Samples outside every span are scored as their own single-frame
/// spans (no neighbors, so no tolerance). A dataset with no positive
/// targets cannot be scored and is a contract error.
pub fn onset_error(probs: &[f32], targets: &[f32], spans: &[(usize, usize)]) -> Result<f64> {
    if probs.len() != targets.len() {
        return Err(Error::contract(format!(
            "onset_error got {} probabilities for {} targets",
            probs.len(),
            targets.len()
        )));
    }
    let owned_spans: Vec<(usize, usize)>;
    let spans: &[(usize, usize)] = if spans.is_empty() {
        owned_spans = (0..probs.len()).map(|i| (i, i + 1)).collect();
        &owned_spans
    } else {
        spans
    };
    let mut covered = vec![false; probs.len()];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    let mut total_true = 0usize;
    for &(start, end) in spans {
        if end > probs.len() || start >= end {
            return Err(Error::contract(format!(
                "span ({start}, {end}) out of range for {} frames",
                probs.len()
            )));
        }
        for c in &mut covered[start..end] {
            if *c {
                return Err(Error::contract("overlapping spans"));
            }
            *c = true;
        }
        let truths: Vec<usize> = (start..end).filter(|&i| targets[i] >= 0.5).collect();
        let preds: Vec<usize> = (start..end).filter(|&i| probs[i] >= 0.5).collect();
        total_true += truths.len();
        // Greedy in-order matching within ±1 frame.
        let mut pi = 0usize;
        let mut matched = vec![false; preds.len()];
        for &t in &truths {
            // Skip predictions too far left to match this or any later truth.
            while pi < preds.len() && preds[pi] + 1 < t {
                pi += 1;
            }
            let mut hit = false;
            for (k, &p) in preds.iter().enumerate().skip(pi) {
                if p > t + 1 {
                    break;
                }
                if !matched[k] && p + 1 >= t && p <= t + 1 {
                    matched[k] = true;
                    hit = true;
                    break;
                }
            }
            if hit {
                tp += 1;
            } else {
                fneg += 1;
            }
        }
        fp += matched.iter().filter(|&&m| !m).count();
    }
    if total_true == 0 {
        return Err(Error::contract(
            "onset_error needs at least one positive target",
        ));
    }
    let f = if 2 * tp + fp + fneg == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    };
    Ok(1.0 - f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_names_roundtrip() {
        for kind in TaskKind::all() {
            assert_eq!(TaskKind::parse(kind.name()).unwrap(), kind);
        }
        assert!(TaskKind::parse("polka").is_err());
    }

    #[test]
    fn reference_architectures_build() {
        for kind in TaskKind::all() {
            let spec = task_spec(kind);
            let model = crate::graph::build_model(
                &spec.layers,
                &spec.input_shape,
                spec.output_activation,
                1,
            )
            .unwrap();
            let trace = model.shape_trace().unwrap();
            assert_eq!(trace.last().unwrap(), &vec![spec.arity]);
            // Every prunable layer must be followed by a batch norm so all
            // ranking criteria stay applicable.
            for li in model.prunable_layers() {
                assert!(
                    model.layers[li].followed_by_batchnorm,
                    "{kind}: prunable layer {li} lacks a following batchnorm"
                );
            }
        }
    }

    #[test]
    fn onset_error_perfect_prediction_scores_zero() {
        let targets = [0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let probs = [0.1, 0.9, 0.2, 0.1, 0.8, 0.0];
        let err = onset_error(&probs, &targets, &[(0, 6)]).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn onset_error_tolerates_one_frame() {
        // Prediction one frame late still counts as a hit.
        let targets = [0.0, 1.0, 0.0, 0.0, 0.0];
        let probs = [0.0, 0.0, 0.9, 0.0, 0.0];
        assert_eq!(onset_error(&probs, &targets, &[(0, 5)]).unwrap(), 0.0);
        // Two frames away is a miss (one FP + one FN).
        let probs = [0.0, 0.0, 0.0, 0.9, 0.0];
        assert_eq!(onset_error(&probs, &targets, &[(0, 5)]).unwrap(), 1.0);
    }

    #[test]
    fn onset_error_counts_false_positives() {
        let targets = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let probs = [0.9, 0.0, 0.0, 0.0, 0.9, 0.0];
        // TP 1, FP 1, FN 0 -> F = 2/(2+1) = 2/3.
        let err = onset_error(&probs, &targets, &[(0, 6)]).unwrap();
        assert!((err - (1.0 - 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn onset_error_tolerance_stops_at_span_edges() {
        // Truth at the end of span A, prediction at the start of span B:
        // adjacent in time but different tracks, so no match.
        let targets = [0.0, 1.0, 0.0, 0.0];
        let probs = [0.0, 0.0, 0.9, 0.0];
        let err = onset_error(&probs, &targets, &[(0, 2), (2, 4)]).unwrap();
        assert_eq!(err, 1.0);
    }

    #[test]
    fn onset_error_without_spans_is_framewise() {
        let targets = [0.0, 1.0, 0.0];
        // With no spans each frame stands alone: a neighbor prediction
        // cannot match.
        let probs = [0.0, 0.0, 0.9];
        assert_eq!(onset_error(&probs, &targets, &[]).unwrap(), 1.0);
        let probs = [0.0, 0.9, 0.0];
        assert_eq!(onset_error(&probs, &targets, &[]).unwrap(), 0.0);
    }

    #[test]
    fn onset_error_requires_positives() {
        let err = onset_error(&[0.1, 0.2], &[0.0, 0.0], &[(0, 2)]);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn onset_error_one_prediction_cannot_match_two_truths() {
        // Two adjacent truths, one prediction between them: greedy matching
        // pairs it with the first truth; the second is a miss.
        let targets = [1.0, 0.0, 1.0, 0.0];
        let probs = [0.0, 0.9, 0.0, 0.0];
        // TP 1, FN 1, FP 0 -> F = 2/3.
        let err = onset_error(&probs, &targets, &[(0, 4)]).unwrap();
        assert!((err - (1.0 - 2.0 / 3.0)).abs() < 1e-12);
    }
}
