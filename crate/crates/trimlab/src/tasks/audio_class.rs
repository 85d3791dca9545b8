//! Timbre classification.
//!
//! Ten synthetic instrument classes, each defined by a fixed harmonic
//! amplitude profile. Classes come in sibling pairs (0↔1, 2↔3, …), and
//! every clip drifts its timbre a random fraction of the way toward its
//! sibling's profile, up to [`DRIFT`]. Because the drift range reaches past
//! the midpoint between the two profiles, a slice of clips from every pair
//! is genuinely ambiguous — the same blended timbre arises from either
//! class — which puts an irreducible error floor of about
//! `(DRIFT − 0.5) / DRIFT` (≈9%) under any classifier, however large, and
//! keeps error ratios between differently sized networks meaningful.
//! Fundamental, phases, level, and the noise bed are drawn per clip and
//! carry no class information.

use super::{
    lowpass_noise, normalize_rms, stream_rng, Dataset, LossKind, Metric, Split, Target, TaskKind,
    SAMPLE_RATE,
};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Number of timbre classes.
pub const CLASSES: usize = 10;
/// Samples per clip.
pub const CLIP_LEN: usize = 2048;
/// Harmonics per timbre profile.
pub const HARMONICS: usize = 10;
/// Minimum pairwise cosine distance between class profiles. Keeps every
/// pair of classes clearly apart in the mean, so the only class overlap is
/// the deliberate sibling drift.
pub const MIN_PROFILE_DISTANCE: f32 = 0.4;
/// Upper end of the per-clip drift toward the sibling profile. Greater
/// than the 0.5 midpoint on purpose: blends in the overlapping stretch are
/// equally likely from either sibling, so no classifier can resolve them.
pub const DRIFT: f32 = 0.55;

/// Fundamental range, in Hz (log-uniform), one octave wide. Narrow enough
/// that harmonic positions stay roughly stable across clips of a class;
/// the top keeps all ten harmonics below 4.5 kHz.
const F_LOW: f32 = 220.0;
const F_HIGH: f32 = 440.0;

fn cosine_distance(a: &[f32; HARMONICS], b: &[f32; HARMONICS]) -> f32 {
    let mut dot = 0.0f32;
    for i in 0..HARMONICS {
        dot += a[i] * b[i];
    }
    1.0 - dot // profiles are unit-normalized
}

/// The class whose profile a clip drifts toward.
pub fn sibling(class: usize) -> usize {
    class ^ 1
}

/// The ten class profiles (unit-norm harmonic amplitudes) for a dataset
/// seed. Deterministic: profiles are drawn from per-(class, attempt)
/// streams and resampled until the new profile clears the distance floor
/// against all accepted ones.
pub fn profiles(seed: u64) -> Vec<[f32; HARMONICS]> {
    let mut out: Vec<[f32; HARMONICS]> = Vec::with_capacity(CLASSES);
    for c in 0..CLASSES {
        let mut attempt = 0u64;
        loop {
            let mut rng = stream_rng(seed, "audio/profile", (c as u64) << 32 | attempt);
            let mut amps = [0.0f32; HARMONICS];
            for a in amps.iter_mut() {
                let u: f32 = rng.gen_range(0.05..1.0);
                *a = u * u; // bias toward sparse, peaky spectra
            }
            let norm = amps.iter().map(|a| a * a).sum::<f32>().sqrt();
            for a in amps.iter_mut() {
                *a /= norm;
            }
            if out.iter().all(|p| cosine_distance(p, &amps) >= MIN_PROFILE_DISTANCE) {
                out.push(amps);
                break;
            }
            attempt += 1;
        }
    }
    out
}

/// Pointwise blend `(1 − t)·a + t·b` of two profiles.
fn blend(a: &[f32; HARMONICS], b: &[f32; HARMONICS], t: f32) -> [f32; HARMONICS] {
    let mut out = [0.0f32; HARMONICS];
    for h in 0..HARMONICS {
        out[h] = (1.0 - t) * a[h] + t * b[h];
    }
    out
}

fn synth_clip(
    out: &mut [f32],
    own: &[f32; HARMONICS],
    sib: &[f32; HARMONICS],
    rng: &mut ChaCha8Rng,
) {
    let amps = blend(own, sib, rng.gen_range(0.0..DRIFT));
    let f0 = F_LOW * (F_HIGH / F_LOW).powf(rng.gen_range(0.0f32..1.0));
    let phases: Vec<f32> = (0..HARMONICS)
        .map(|_| rng.gen_range(0.0..std::f32::consts::TAU))
        .collect();
    out.fill(0.0);
    for (h, (&a, &ph)) in amps.iter().zip(&phases).enumerate() {
        let w = std::f32::consts::TAU * f0 * (h + 1) as f32 / SAMPLE_RATE;
        for (t, o) in out.iter_mut().enumerate() {
            *o += a * (w * t as f32 + ph).sin();
        }
    }
    let level = rng.gen_range(0.5..1.0);
    normalize_rms(out, 0.25 * level);
    let noise = rng.gen_range(0.05..0.30);
    let bed = lowpass_noise(rng, out.len(), 0.85, 0.25 * noise);
    for (o, b) in out.iter_mut().zip(&bed) {
        *o += b;
    }
}

fn fill_split(
    split: &mut Split,
    per_class: usize,
    profiles: &[[f32; HARMONICS]],
    seed: u64,
    tag: &str,
) {
    let mut clip = vec![0.0f32; CLIP_LEN];
    for c in 0..CLASSES {
        for i in 0..per_class {
            let mut rng = stream_rng(seed, tag, (c as u64) << 32 | i as u64);
            synth_clip(&mut clip, &profiles[c], &profiles[sibling(c)], &mut rng);
            split.push(&clip, Target::Class(c as u32));
        }
    }
}

/// Generates the timbre dataset: `per_class` training clips per class, with
/// validation and test splits of a fifth of that (at least 2) per class.
pub fn generate(per_class: usize, seed: u64) -> Result<Dataset> {
    if per_class < 5 {
        return Err(Error::range(format!(
            "audio-class needs at least 5 clips per class, got {per_class}"
        )));
    }
    let holdout = (per_class / 5).max(2);
    let profiles = profiles(seed);
    let mut train = Split::new(CLIP_LEN);
    let mut val = Split::new(CLIP_LEN);
    let mut test = Split::new(CLIP_LEN);
    fill_split(&mut train, per_class, &profiles, seed, "audio/train");
    fill_split(&mut val, holdout, &profiles, seed, "audio/val");
    fill_split(&mut test, holdout, &profiles, seed, "audio/test");
    Ok(Dataset {
        kind: TaskKind::AudioClass,
        seed,
        input_shape: vec![1, CLIP_LEN],
        arity: CLASSES,
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
    fn profiles_are_distinct_and_normalized() {
        for seed in [0u64, 7, 123] {
            let ps = profiles(seed);
            assert_eq!(ps.len(), CLASSES);
            for p in &ps {
                let norm: f32 = p.iter().map(|a| a * a).sum::<f32>().sqrt();
                assert!((norm - 1.0).abs() < 1e-5);
            }
            for i in 0..CLASSES {
                for j in i + 1..CLASSES {
                    let d = cosine_distance(&ps[i], &ps[j]);
                    assert!(
                        d >= MIN_PROFILE_DISTANCE,
                        "seed {seed}: classes {i},{j} too close ({d})"
                    );
                }
            }
        }
    }

    #[test]
    fn drift_reaches_past_the_midpoint() {
        // The ambiguity floor exists only if drift crosses the midpoint
        // between sibling profiles (and pairing must be an involution).
        assert!(DRIFT > 0.5 && DRIFT < 1.0);
        for c in 0..CLASSES {
            assert_eq!(sibling(sibling(c)), c);
            assert_ne!(sibling(c), c);
        }
        // A class-c clip at drift t and a sibling clip at 1 − t carry the
        // same blended timbre, which is what makes the overlap unresolvable.
        let ps = profiles(11);
        let (a, b) = (&ps[4], &ps[sibling(4)]);
        let from_a = blend(a, b, 0.52);
        let from_b = blend(b, a, 1.0 - 0.52);
        for h in 0..HARMONICS {
            assert!((from_a[h] - from_b[h]).abs() < 1e-6);
        }
        assert_eq!(blend(a, b, 0.0), *a);
        assert_eq!(blend(a, b, 1.0), *b);
    }

    #[test]
    fn splits_are_class_balanced() {
        let ds = generate(10, 2).unwrap();
        assert_eq!(ds.train.n, 100);
        assert_eq!(ds.val.n, 20);
        assert_eq!(ds.test.n, 20);
        for split in [&ds.train, &ds.val, &ds.test] {
            let mut counts = [0usize; CLASSES];
            for t in &split.targets {
                let Target::Class(c) = t else { panic!("class targets") };
                counts[*c as usize] += 1;
            }
            assert!(counts.iter().all(|&c| c == counts[0]));
        }
        ds.check().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(6, 42).unwrap();
        let b = generate(6, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(6, 43).unwrap());
    }

    #[test]
    fn splits_are_disjoint() {
        let ds = generate(8, 5).unwrap();
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
    fn clips_have_sane_levels() {
        let ds = generate(5, 9).unwrap();
        for i in 0..ds.train.n {
            let s = ds.train.sample(i);
            let rms =
                (s.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / s.len() as f64)
                    .sqrt();
            assert!(rms > 0.05 && rms < 1.0, "clip {i} rms {rms}");
        }
    }
}
