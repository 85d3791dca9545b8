//! Pitch-bin classification.
//!
//! Each sample is a 1024-sample harmonic frame whose fundamental sits in
//! one of 60 semitone-spaced bins spanning five octaves upward from
//! [`F_MIN`]. Frames are synthesized phase-aligned (near-zero harmonic
//! phases), like pitch-synchronous analysis windows over a pulse train, so
//! pitch is carried by overt waveform structure rather than by statistics
//! that only a wide model could exploit.
//!
//! The difficulty knob is the fundamental's jitter around its bin center:
//! [`JITTER`] deliberately exceeds half the bin spacing, so adjacent bins
//! overlap and a slice of every bin's samples is genuinely ambiguous — the
//! same frequency is produced by two labels. That puts an irreducible
//! error floor of about `(JITTER − 0.5) / JITTER` (≈9%) under every model
//! regardless of capacity, which keeps error *ratios* between differently
//! sized models meaningful: nobody can win by driving error to zero.

use super::{
    normalize_rms, stream_rng, Dataset, LossKind, Metric, Split, Target, TaskKind, SAMPLE_RATE,
};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Number of pitch bins (five octaves of semitones).
pub const BINS: usize = 60;
/// Frequency of bin 0, in Hz.
pub const F_MIN: f32 = 250.0;
/// Samples per frame.
pub const FRAME_LEN: usize = 1024;
/// Maximum fundamental jitter, in semitones. Greater than half the bin
/// spacing on purpose: the overlap between adjacent bins sets the task's
/// irreducible error floor (see the module docs).
pub const JITTER: f32 = 0.55;
/// Harmonics are generated up to this order (fewer when they would exceed
/// the usable band below Nyquist).
pub const MAX_HARMONIC: usize = 14;
/// Highest partial frequency the generator will emit, in Hz.
const F_CEIL: f32 = 7_800.0;
/// Per-harmonic phase skew range, in radians. Small enough that frames stay
/// pulse-like and template-matchable; nonzero so clips are not pure
/// templates.
const PHASE_SKEW: f32 = 0.3;
/// Per-sample white-noise amplitude range, relative to a signal RMS of
/// 0.25·level. Texture, not the difficulty driver — the jitter overlap is.
const NOISE_MIN: f32 = 0.03;
const NOISE_MAX: f32 = 0.15;

/// Center frequency of a pitch bin, in Hz.
pub fn bin_frequency(bin: usize) -> f32 {
    F_MIN * 2f32.powf(bin as f32 / 12.0)
}

/// Nearest pitch bin for a frequency.
pub fn label_for_frequency(f: f32) -> Result<usize> {
    if !f.is_finite() || f <= 0.0 {
        return Err(Error::range(format!("frequency must be positive, got {f}")));
    }
    let bin = (12.0 * (f / F_MIN).log2()).round();
    if bin < 0.0 || bin >= BINS as f32 {
        return Err(Error::range(format!(
            "frequency {f} Hz falls outside the {BINS}-bin range"
        )));
    }
    Ok(bin as usize)
}

/// Synthesizes one frame with fundamental `f0` into `out`.
fn synth_frame(out: &mut [f32], f0: f32, rng: &mut ChaCha8Rng) {
    let n_harm = ((F_CEIL / f0).floor() as usize).clamp(1, MAX_HARMONIC);
    let amps: Vec<f32> = (1..=n_harm)
        .map(|h| (h as f32).powf(-0.4) * rng.gen_range(0.6..1.0))
        .collect();
    let phases: Vec<f32> = (0..n_harm)
        .map(|_| rng.gen_range(-PHASE_SKEW..PHASE_SKEW))
        .collect();
    out.fill(0.0);
    for (h, (&a, &ph)) in amps.iter().zip(&phases).enumerate() {
        let w = std::f32::consts::TAU * f0 * (h + 1) as f32 / SAMPLE_RATE;
        for (t, o) in out.iter_mut().enumerate() {
            *o += a * (w * t as f32 + ph).sin();
        }
    }
    let level = rng.gen_range(0.6..1.0);
    normalize_rms(out, 0.25 * level);
    let noise = rng.gen_range(NOISE_MIN..NOISE_MAX);
    for o in out.iter_mut() {
        *o += noise * rng.gen_range(-1.0f32..1.0);
    }
}

fn fill_split(split: &mut Split, n: usize, seed: u64, tag: &str) {
    let mut frame = vec![0.0f32; FRAME_LEN];
    for i in 0..n {
        // Cycle bins so every split covers all of them.
        let bin = i % BINS;
        let mut rng = stream_rng(seed, tag, i as u64);
        let jitter = rng.gen_range(-JITTER..JITTER);
        let f0 = F_MIN * 2f32.powf((bin as f32 + jitter) / 12.0);
        synth_frame(&mut frame, f0, &mut rng);
        split.push(&frame, Target::Class(bin as u32));
    }
}

/// Generates the pitch dataset: `size` samples total, split 70/15/15.
pub fn generate(size: usize, seed: u64) -> Result<Dataset> {
    if size < 20 {
        return Err(Error::range(format!(
            "pitch dataset needs at least 20 samples, got {size}"
        )));
    }
    let n_val = size * 15 / 100;
    let n_test = size * 15 / 100;
    let n_train = size - n_val - n_test;
    let mut train = Split::new(FRAME_LEN);
    let mut val = Split::new(FRAME_LEN);
    let mut test = Split::new(FRAME_LEN);
    fill_split(&mut train, n_train, seed, "pitch/train");
    fill_split(&mut val, n_val, seed, "pitch/val");
    fill_split(&mut test, n_test, seed, "pitch/test");
    Ok(Dataset {
        kind: TaskKind::Pitch,
        seed,
        input_shape: vec![1, FRAME_LEN],
        arity: BINS,
        loss: LossKind::CrossEntropy,
        metric: Metric::ClassError,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_centers_map_back_to_their_bin() {
        for bin in 0..BINS {
            assert_eq!(label_for_frequency(bin_frequency(bin)).unwrap(), bin);
        }
    }

    #[test]
    fn one_semitone_up_is_the_next_bin() {
        let semitone = 2f32.powf(1.0 / 12.0);
        for bin in 0..BINS - 1 {
            let f = bin_frequency(bin) * semitone;
            assert_eq!(label_for_frequency(f).unwrap(), bin + 1);
        }
    }

    #[test]
    fn out_of_range_frequencies_are_rejected()  {
        assert!(label_for_frequency(0.0).is_err());
        assert!(label_for_frequency(-5.0).is_err());
        assert!(label_for_frequency(100.0).is_err()); // below bin 0
        assert!(label_for_frequency(16_000.0).is_err()); // above bin 59
    }

    #[test]
    fn jitter_reaches_into_adjacent_bins() {
        // The overlap is the point: maximum jitter crosses the halfway
        // line, so the nearest bin differs from the generating bin there.
        assert!(JITTER > 0.5 && JITTER < 1.0);
        let f = bin_frequency(30) * 2f32.powf(JITTER / 12.0);
        assert_eq!(label_for_frequency(f).unwrap(), 31);
        let f = bin_frequency(30) * 2f32.powf(-JITTER / 12.0);
        assert_eq!(label_for_frequency(f).unwrap(), 29);
        // Jitter inside the halfway line still labels the center.
        let f = bin_frequency(30) * 2f32.powf(0.4 / 12.0);
        assert_eq!(label_for_frequency(f).unwrap(), 30);
    }

    #[test]
    fn split_sizes_are_70_15_15() {
        let ds = generate(200, 3).unwrap();
        assert_eq!(ds.val.n, 30);
        assert_eq!(ds.test.n, 30);
        assert_eq!(ds.train.n, 140);
        ds.check().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(120, 9).unwrap();
        let b = generate(120, 9).unwrap();
        assert_eq!(a, b);
        let c = generate(120, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn splits_are_disjoint() {
        let ds = generate(240, 4).unwrap();
        let hash = |s: &Split| -> std::collections::HashSet<u64> {
            (0..s.n)
                .map(|i| {
                    super::super::fnv1a64(
                        &s.sample(i)
                            .iter()
                            .flat_map(|v| v.to_le_bytes())
                            .collect::<Vec<u8>>(),
                    )
                })
                .collect()
        };
        let (tr, va, te) = (hash(&ds.train), hash(&ds.val), hash(&ds.test));
        assert!(tr.is_disjoint(&va));
        assert!(tr.is_disjoint(&te));
        assert!(va.is_disjoint(&te));
    }

    #[test]
    fn all_bins_present_in_every_split() {
        let ds = generate(400, 7).unwrap();
        for split in [&ds.train, &ds.val, &ds.test] {
            let mut seen = [false; BINS];
            for t in &split.targets {
                let Target::Class(c) = t else { panic!("class targets") };
                seen[*c as usize] = true;
            }
            assert!(seen.iter().all(|&s| s), "some bin missing from a split");
        }
    }

    #[test]
    fn frames_have_sane_levels() {
        let ds = generate(60, 1).unwrap();
        for i in 0..ds.train.n {
            let s = ds.train.sample(i);
            let rms =
                (s.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / s.len() as f64)
                    .sqrt();
            assert!(rms > 0.05 && rms < 1.0, "sample {i} rms {rms}");
            assert!(s.iter().all(|v| v.abs() < 4.0));
        }
    }
}
