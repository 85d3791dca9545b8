//! Percussive onset detection in noise-bed tracks.
//!
//! Each track is ~2.1 s of low-passed, slowly amplitude-modulated noise
//! with a handful of sharp percussive bursts mixed in. Tracks are analyzed
//! into 64 frames of a 64-band log-spaced filterbank (FFT 2048, hop 512,
//! Hann window), and the model sees 15-frame context windows, predicting
//! whether an onset lands in the center frame.
//!
//! Splits are made by whole tracks. The training split takes every positive
//! window plus twice as many negatives (sampled at least two frames away
//! from any onset); validation and test keep *all* windows of their tracks,
//! in order, with span metadata so the F-measure can honor its ±1 frame
//! tolerance within tracks only.

use super::{
    lowpass_noise, stream_rng, Dataset, LossKind, Metric, Split, Target, TaskKind, SAMPLE_RATE,
};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Filterbank bands per frame.
pub const BANDS: usize = 64;
/// Frames in one model input window.
pub const CONTEXT: usize = 15;
/// Analysis frames per track.
pub const FRAMES: usize = 64;
/// FFT size and analysis window length, in samples.
pub const FFT_LEN: usize = 2048;
/// Hop between frames, in samples.
pub const HOP: usize = 512;
/// Samples per track.
pub const TRACK_SAMPLES: usize = FFT_LEN + (FRAMES - 1) * HOP;

/// Half of the context window (frames of lookback/lookahead).
const HALF: usize = CONTEXT / 2;
/// Valid window centers: far enough from track edges for a full context.
const FIRST_CENTER: usize = HALF;
const LAST_CENTER: usize = FRAMES - HALF - 1;
/// Onsets keep one frame clear of the first/last center so the ±1 frame
/// tolerance never reaches outside the evaluated range.
const FIRST_ONSET: usize = FIRST_CENTER + 1;
const LAST_ONSET: usize = LAST_CENTER - 1;
/// Minimum separation between onsets, in frames.
const MIN_SEPARATION: usize = 4;
/// Filterbank frequency range, in Hz.
const BAND_LOW: f32 = 60.0;
const BAND_HIGH: f32 = 7_800.0;

/// Windows per track in evaluation splits.
pub const WINDOWS_PER_TRACK: usize = LAST_CENTER - FIRST_CENTER + 1;

/// Synthesizes one track: returns its samples and the onset frames.
pub(crate) fn synthesize_track(rng: &mut ChaCha8Rng, n_onsets: usize) -> (Vec<f32>, Vec<usize>) {
    let bed_rms = rng.gen_range(0.05..0.10);
    let mut x = lowpass_noise(rng, TRACK_SAMPLES, 0.9, bed_rms);
    // Slow amplitude modulation keeps the bed from being uniform.
    let am_rate = rng.gen_range(0.5..2.0f32);
    let am_phase = rng.gen_range(0.0..std::f32::consts::TAU);
    for (t, v) in x.iter_mut().enumerate() {
        let am = 1.0 + 0.3 * (std::f32::consts::TAU * am_rate * t as f32 / SAMPLE_RATE + am_phase).sin();
        *v *= am;
    }
    // Pick onset frames with a minimum separation.
    let mut onsets: Vec<usize> = Vec::with_capacity(n_onsets);
    let mut attempts = 0;
    while onsets.len() < n_onsets && attempts < 500 {
        attempts += 1;
        let f = rng.gen_range(FIRST_ONSET..=LAST_ONSET);
        if onsets.iter().all(|&o| o.abs_diff(f) >= MIN_SEPARATION) {
            onsets.push(f);
        }
    }
    onsets.sort_unstable();
    // Mix in one percussive burst per onset, anchored near the frame center.
    for &frame in &onsets {
        let center = frame * HOP + FFT_LEN / 2;
        let pos = (center as i64 + i64::from(rng.gen_range(-128i32..=128))) as usize;
        let len = rng.gen_range(400..1200usize);
        let amp = rng.gen_range(0.5..1.0f32);
        let tone = rng.gen_range(800.0..3500.0f32);
        for i in 0..len {
            let t = pos + i;
            if t >= TRACK_SAMPLES {
                break;
            }
            let env = (-3.0 * i as f32 / len as f32).exp();
            let w = std::f32::consts::TAU * tone * i as f32 / SAMPLE_RATE;
            x[t] += amp * env * (0.65 * rng.gen_range(-1.0f32..1.0) + 0.35 * w.sin());
        }
    }
    (x, onsets)
}

/// Sparse triangular filterbank: per band, the (fft bin, weight) pairs.
/// Bands are log-spaced over [`BAND_LOW`], [`BAND_HIGH`].
pub(crate) fn filterbank() -> Vec<Vec<(usize, f32)>> {
    let edges: Vec<f32> = (0..=BANDS + 1)
        .map(|k| BAND_LOW * (BAND_HIGH / BAND_LOW).powf(k as f32 / (BANDS + 1) as f32))
        .collect();
    let bin_hz = SAMPLE_RATE / FFT_LEN as f32;
    (0..BANDS)
        .map(|k| {
            let (lo, mid, hi) = (edges[k], edges[k + 1], edges[k + 2]);
            let mut taps = Vec::new();
            let first = (lo / bin_hz).ceil() as usize;
            let last = (hi / bin_hz).floor() as usize;
            for bin in first..=last.min(FFT_LEN / 2) {
                let f = bin as f32 * bin_hz;
                let w = if f <= mid {
                    (f - lo) / (mid - lo)
                } else {
                    (hi - f) / (hi - mid)
                };
                if w > 0.0 {
                    taps.push((bin, w));
                }
            }
            taps
        })
        .collect()
}

/// Log filterbank features of one track: `FRAMES × BANDS`, frame-major.
pub(crate) fn track_features(samples: &[f32]) -> Vec<f32> {
    debug_assert_eq!(samples.len(), TRACK_SAMPLES);
    let bank = filterbank();
    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(FFT_LEN);
    let hann: Vec<f32> = (0..FFT_LEN)
        .map(|i| {
            0.5 - 0.5 * (std::f32::consts::TAU * i as f32 / FFT_LEN as f32).cos()
        })
        .collect();
    let mut feats = vec![0.0f32; FRAMES * BANDS];
    let mut buf = vec![Complex::new(0.0f32, 0.0); FFT_LEN];
    let mut power = vec![0.0f32; FFT_LEN / 2 + 1];
    for frame in 0..FRAMES {
        let start = frame * HOP;
        for i in 0..FFT_LEN {
            buf[i] = Complex::new(samples[start + i] * hann[i], 0.0);
        }
        fft.process(&mut buf);
        for (i, p) in power.iter_mut().enumerate() {
            *p = buf[i].norm_sqr();
        }
        for (k, taps) in bank.iter().enumerate() {
            let mut e = 0.0f32;
            for &(bin, w) in taps {
                e += w * power[bin];
            }
            feats[frame * BANDS + k] = (1e-6 + e).ln();
        }
    }
    feats
}

/// Copies the `[BANDS, CONTEXT]` window centered on `center` out of
/// frame-major features (channel-major output, as the model expects).
pub(crate) fn window_of(feats: &[f32], center: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), BANDS * CONTEXT);
    for c in 0..BANDS {
        for (tau, slot) in out[c * CONTEXT..(c + 1) * CONTEXT].iter_mut().enumerate() {
            let frame = center - HALF + tau;
            *slot = feats[frame * BANDS + c];
        }
    }
}

struct Track {
    feats: Vec<f32>,
    onsets: Vec<usize>,
}

fn make_track(seed: u64, index: u64) -> Track {
    let mut rng = stream_rng(seed, "onset/track", index);
    let n_onsets = rng.gen_range(5..=10);
    let (samples, onsets) = synthesize_track(&mut rng, n_onsets);
    Track {
        feats: track_features(&samples),
        onsets,
    }
}

/// Adds every valid window of a track to an evaluation split, recording the
/// track's span.
fn push_eval_track(split: &mut Split, track: &Track) {
    let start = split.n;
    let mut win = vec![0.0f32; BANDS * CONTEXT];
    for center in FIRST_CENTER..=LAST_CENTER {
        window_of(&track.feats, center, &mut win);
        let label = if track.onsets.contains(&center) { 1.0 } else { 0.0 };
        split.push(&win, Target::Binary(label));
    }
    split.spans.push((start, split.n));
}

/// Adds a track's positive windows plus `neg_ratio`× sampled negatives.
fn push_train_track(split: &mut Split, track: &Track, rng: &mut ChaCha8Rng, neg_ratio: usize) {
    let mut win = vec![0.0f32; BANDS * CONTEXT];
    for &o in &track.onsets {
        window_of(&track.feats, o, &mut win);
        split.push(&win, Target::Binary(1.0));
    }
    let mut negatives: Vec<usize> = (FIRST_CENTER..=LAST_CENTER)
        .filter(|&c| track.onsets.iter().all(|&o| o.abs_diff(c) >= 2))
        .collect();
    negatives.shuffle(rng);
    negatives.truncate(neg_ratio * track.onsets.len());
    negatives.sort_unstable(); // deterministic order independent of shuffle tail
    for &c in &negatives {
        window_of(&track.feats, c, &mut win);
        split.push(&win, Target::Binary(0.0));
    }
}

/// Generates the onset dataset from `n_tracks` synthetic tracks, split by
/// track 60/20/20.
pub fn generate(n_tracks: usize, seed: u64) -> Result<Dataset> {
    if n_tracks < 5 {
        return Err(Error::range(format!(
            "onset dataset needs at least 5 tracks, got {n_tracks}"
        )));
    }
    let n_val = (n_tracks / 5).max(1);
    let n_test = (n_tracks / 5).max(1);
    let n_train = n_tracks - n_val - n_test;
    let mut train = Split::new(BANDS * CONTEXT);
    let mut val = Split::new(BANDS * CONTEXT);
    let mut test = Split::new(BANDS * CONTEXT);
    for i in 0..n_tracks {
        let track = make_track(seed, i as u64);
        if i < n_train {
            let mut rng = stream_rng(seed, "onset/negatives", i as u64);
            push_train_track(&mut train, &track, &mut rng, 2);
        } else if i < n_train + n_val {
            push_eval_track(&mut val, &track);
        } else {
            push_eval_track(&mut test, &track);
        }
    }
    Ok(Dataset {
        kind: TaskKind::Onset,
        seed,
        input_shape: vec![BANDS, CONTEXT],
        arity: 1,
        loss: LossKind::Binary,
        metric: Metric::OnsetError,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn every_band_has_taps() {
        let bank = filterbank();
        assert_eq!(bank.len(), BANDS);
        for (k, taps) in bank.iter().enumerate() {
            let sum: f32 = taps.iter().map(|&(_, w)| w).sum();
            assert!(sum > 0.0, "band {k} is empty");
            for &(bin, w) in taps {
                assert!(bin <= FFT_LEN / 2);
                assert!(w > 0.0 && w <= 1.0);
            }
        }
    }

    #[test]
    fn silent_track_has_no_positive_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (samples, onsets) = synthesize_track(&mut rng, 0);
        assert!(onsets.is_empty());
        let feats = track_features(&samples);
        assert!(feats.iter().all(|v| v.is_finite()));
        let track = Track { feats, onsets };
        let mut split = Split::new(BANDS * CONTEXT);
        push_eval_track(&mut split, &track);
        assert_eq!(split.n, WINDOWS_PER_TRACK);
        assert!(split
            .targets
            .iter()
            .all(|t| matches!(t, Target::Binary(v) if *v == 0.0)));
    }

    #[test]
    fn single_onset_labels_exactly_one_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (samples, onsets) = synthesize_track(&mut rng, 1);
        assert_eq!(onsets.len(), 1);
        let track = Track {
            feats: track_features(&samples),
            onsets: onsets.clone(),
        };
        let mut split = Split::new(BANDS * CONTEXT);
        push_eval_track(&mut split, &track);
        let positives: Vec<usize> = split
            .targets
            .iter()
            .enumerate()
            .filter(|(_, t)| matches!(t, Target::Binary(v) if *v == 1.0))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(positives, vec![onsets[0] - FIRST_CENTER]);
    }

    #[test]
    fn bursts_raise_band_energy_at_their_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (samples, onsets) = synthesize_track(&mut rng, 6);
        let feats = track_features(&samples);
        for &o in &onsets {
            let at: f32 = feats[o * BANDS..(o + 1) * BANDS].iter().sum();
            let before: f32 = feats[(o - 3) * BANDS..(o - 2) * BANDS].iter().sum();
            assert!(
                at > before + 5.0,
                "onset at frame {o} barely visible: {at} vs {before}"
            );
        }
    }

    #[test]
    fn onsets_respect_separation_and_range() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, onsets) = synthesize_track(&mut rng, 10);
            for w in onsets.windows(2) {
                assert!(w[1] - w[0] >= MIN_SEPARATION);
            }
            for &o in &onsets {
                assert!((FIRST_ONSET..=LAST_ONSET).contains(&o));
            }
        }
    }

    #[test]
    fn eval_spans_partition_their_split() {
        let ds = generate(10, 4).unwrap();
        for split in [&ds.val, &ds.test] {
            assert_eq!(split.spans.len(), 2);
            let mut expect = 0;
            for &(a, b) in &split.spans {
                assert_eq!(a, expect);
                assert_eq!(b - a, WINDOWS_PER_TRACK);
                expect = b;
            }
            assert_eq!(expect, split.n);
        }
        assert!(ds.train.spans.is_empty());
        ds.check().unwrap();
    }

    #[test]
    fn train_split_is_one_to_two() {
        let ds = generate(10, 8).unwrap();
        let pos = ds
            .train
            .targets
            .iter()
            .filter(|t| matches!(t, Target::Binary(v) if *v == 1.0))
            .count();
        let neg = ds.train.n - pos;
        assert!(pos > 0);
        assert_eq!(neg, 2 * pos);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(6, 11).unwrap();
        let b = generate(6, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(6, 12).unwrap());
    }
}
