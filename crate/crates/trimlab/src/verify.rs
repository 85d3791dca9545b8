//! Independent verification oracles.
//!
//! Everything here re-derives results the library already computes, using
//! deliberately different code: plain double-precision loops instead of the
//! tape, full sorts instead of selection logic, and snapshot surgery instead
//! of provenance walks. The oracles back the heavyweight correctness suite
//! and are kept out of any hot path.
//!
//! * [`gradient_battery`] checks every differentiable tape operation against
//!   central finite differences of a naive `f64` re-implementation.
//! * [`random_chain_model`] / [`random_plan`] / [`trim_zero_gap`] compare
//!   structurally trimmed networks against zero-masked full-size twins.
//! * [`magnitude_oracle`] / [`activation_oracle`] / [`batchnorm_oracle`] and
//!   [`rank_oracle`] recompute criterion scores and keep decisions by brute
//!   force.
//! * [`expected_rewound`] / [`param_mismatches`] rebuild the exact model a
//!   rewind must produce and count bitwise disagreements.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{build_model, LayerKind, LayerSpec, ModelGraph, OutputActivation};
use crate::lottery::{trim, Criterion, CriterionScores, Scope, TrimPlan};
use crate::tasks::Split;
use crate::tensor::tape::{Tape, BCE_CLAMP, BN_EPS};
use crate::tensor::{Mode, Tensor};
use crate::train::RewindSnapshot;

// ---------------------------------------------------------------------------
// Finite-difference gradient battery
// ---------------------------------------------------------------------------

/// Step for central differences.
const FD_STEP: f64 = 1e-3;
/// A gradient must match to this relative error…
const FD_TOL: f64 = 1e-3;
/// …where "relative" bottoms out at this magnitude, giving an absolute
/// tolerance of `FD_TOL · FD_FLOOR` for near-zero gradients.
const FD_FLOOR: f64 = 0.01;

/// Outcome of a [`gradient_battery`] run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    /// Distinct random shapes checked.
    pub cases: usize,
    /// Scalar partial derivatives compared.
    pub coords: usize,
    /// Largest relative disagreement seen.
    pub max_rel: f64,
    /// Whether every coordinate stayed within tolerance.
    pub ok: bool,
}

/// One op under test: leaf parameters, the tape's gradients for them, and a
/// naive double-precision re-implementation of the same scalar loss.
struct FdCase {
    name: &'static str,
    params: Vec<Vec<f64>>,
    analytic: Vec<Vec<f64>>,
    loss: Box<dyn Fn(&[Vec<f64>]) -> f64>,
}

fn uni(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// Central finite differences of `case.loss` against the recorded analytic
/// gradients; returns (coords checked, worst relative error).
fn fd_check(case: &FdCase) -> (usize, f64) {
    let mut point = case.params.clone();
    let mut coords = 0;
    let mut worst = 0.0f64;
    for ti in 0..point.len() {
        for j in 0..point[ti].len() {
            let orig = point[ti][j];
            point[ti][j] = orig + FD_STEP;
            let up = (case.loss)(&point);
            point[ti][j] = orig - FD_STEP;
            let down = (case.loss)(&point);
            point[ti][j] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let an = case.analytic[ti][j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
            coords += 1;
        }
    }
    (coords, worst)
}

fn fd_affine(rng: &mut ChaCha8Rng) -> Result<FdCase> {
    let (b, i, o) = (
        rng.gen_range(1..=3usize),
        rng.gen_range(1..=5usize),
        rng.gen_range(1..=4usize),
    );
    let x = uni(rng, b * i, -1.0, 1.0);
    let w = uni(rng, o * i, -1.0, 1.0);
    let bias = uni(rng, o, -0.5, 0.5);
    let r = uni(rng, b * o, 0.5, 1.5);
    let mut tape = Tape::new();
    let xv = tape.leaf_from(&[b, i], x.clone(), true);
    let wv = tape.leaf_from(&[o, i], w.clone(), true);
    let bv = tape.leaf_from(&[o], bias.clone(), true);
    let rv = tape.leaf_from(&[b, o], r.clone(), false);
    let y = tape.affine(xv, wv, bv)?;
    let m = tape.mul(y, rv)?;
    let loss = tape.sum(m);
    let g = tape.backward(loss)?;
    let analytic = vec![
        to64(g.get(xv).unwrap()),
        to64(g.get(wv).unwrap()),
        to64(g.get(bv).unwrap()),
    ];
    let r64 = to64(&r);
    Ok(FdCase {
        name: "affine",
        params: vec![to64(&x), to64(&w), to64(&bias)],
        analytic,
        loss: Box::new(move |p| {
            let (x, w, bias) = (&p[0], &p[1], &p[2]);
            let mut s = 0.0;
            for bi in 0..b {
                for oo in 0..o {
                    let mut y = bias[oo];
                    for ii in 0..i {
                        y += x[bi * i + ii] * w[oo * i + ii];
                    }
                    s += y * r64[bi * o + oo];
                }
            }
            s
        }),
    })
}

/// Naive single-channel-major cross-correlation used by several oracles:
/// `out[o] += w[j] · x[o·stride + j·dilation − padding]`, zero outside.
#[allow(clippy::too_many_arguments)]
fn naive_conv_accum(
    out: &mut [f64],
    x: &[f64],
    w: &[f64],
    len: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
) {
    for (o, slot) in out.iter_mut().enumerate() {
        for (j, &wj) in w.iter().enumerate() {
            let pos = o * stride + j * dilation;
            if pos >= padding && pos - padding < len {
                *slot += wj * x[pos - padding];
            }
        }
    }
}

fn fd_conv(rng: &mut ChaCha8Rng) -> Result<FdCase> {
    let (b, ci, co, len, kernel, stride, dilation, padding, l_out) = loop {
        let b = rng.gen_range(1..=2usize);
        let ci = rng.gen_range(1..=3usize);
        let co = rng.gen_range(1..=3usize);
        let len = rng.gen_range(6..=10usize);
        let kernel = rng.gen_range(1..=3usize);
        let stride = rng.gen_range(1..=2usize);
        let dilation = rng.gen_range(1..=2usize);
        let padding = rng.gen_range(0..=2usize);
        if let Ok(l_out) = Tape::conv1d_out_len(len, kernel, stride, dilation, padding) {
            break (b, ci, co, len, kernel, stride, dilation, padding, l_out);
        }
    };
    let x = uni(rng, b * ci * len, -1.0, 1.0);
    let w = uni(rng, co * ci * kernel, -1.0, 1.0);
    let bias = uni(rng, co, -0.5, 0.5);
    let r = uni(rng, b * co * l_out, 0.5, 1.5);
    let mut tape = Tape::new();
    let xv = tape.leaf_from(&[b, ci, len], x.clone(), true);
    let wv = tape.leaf_from(&[co, ci, kernel], w.clone(), true);
    let bv = tape.leaf_from(&[co], bias.clone(), true);
    let rv = tape.leaf_from(&[b, co, l_out], r.clone(), false);
    let y = tape.conv1d(xv, wv, bv, stride, dilation, padding)?;
    let m = tape.mul(y, rv)?;
    let loss = tape.sum(m);
    let g = tape.backward(loss)?;
    let analytic = vec![
        to64(g.get(xv).unwrap()),
        to64(g.get(wv).unwrap()),
        to64(g.get(bv).unwrap()),
    ];
    let r64 = to64(&r);
    Ok(FdCase {
        name: "conv1d",
        params: vec![to64(&x), to64(&w), to64(&bias)],
        analytic,
        loss: Box::new(move |p| {
            let (x, w, bias) = (&p[0], &p[1], &p[2]);
            let mut s = 0.0;
            for bi in 0..b {
                for coo in 0..co {
                    let mut row = vec![bias[coo]; l_out];
                    for cii in 0..ci {
                        naive_conv_accum(
                            &mut row,
                            &x[(bi * ci + cii) * len..(bi * ci + cii + 1) * len],
                            &w[(coo * ci + cii) * kernel..(coo * ci + cii + 1) * kernel],
                            len,
                            stride,
                            dilation,
                            padding,
                        );
                    }
                    for (o, v) in row.iter().enumerate() {
                        s += v * r64[(bi * co + coo) * l_out + o];
                    }
                }
            }
            s
        }),
    })
}

/// `y = γ·(x − μ)/√(σ² + ε) + β` in f64 with per-channel statistics.
fn naive_bn(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    ch: usize,
    len: usize,
) -> Vec<f64> {
    let batch = x.len() / (ch * len);
    let mut out = vec![0.0; x.len()];
    for bi in 0..batch {
        for c in 0..ch {
            let inv = 1.0 / (var[c] + f64::from(BN_EPS)).sqrt();
            let base = (bi * ch + c) * len;
            for t in 0..len {
                out[base + t] = gamma[c] * (x[base + t] - mean[c]) * inv + beta[c];
            }
        }
    }
    out
}

/// Per-channel biased batch statistics in f64.
fn naive_batch_stats(x: &[f64], ch: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
    let batch = x.len() / (ch * len);
    let n = (batch * len) as f64;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let mut s = 0.0;
        for bi in 0..batch {
            let base = (bi * ch + c) * len;
            for t in 0..len {
                s += x[base + t];
            }
        }
        mean[c] = s / n;
        let mut q = 0.0;
        for bi in 0..batch {
            let base = (bi * ch + c) * len;
            for t in 0..len {
                let d = x[base + t] - mean[c];
                q += d * d;
            }
        }
        var[c] = q / n;
    }
    (mean, var)
}

fn fd_batchnorm(rng: &mut ChaCha8Rng, mode: Mode) -> Result<FdCase> {
    let b = rng.gen_range(2..=4usize);
    let ch = rng.gen_range(1..=3usize);
    let len = rng.gen_range(1..=3usize);
    let x = uni(rng, b * ch * len, -1.0, 1.0);
    let gamma = uni(rng, ch, 0.5, 1.5);
    let beta = uni(rng, ch, -0.5, 0.5);
    let rm = uni(rng, ch, -0.5, 0.5);
    let rv = uni(rng, ch, 0.5, 1.5);
    let r = uni(rng, b * ch * len, 0.5, 1.5);
    let mut tape = Tape::new();
    let xv = tape.leaf_from(&[b, ch, len], x.clone(), true);
    let gv = tape.leaf_from(&[ch], gamma.clone(), true);
    let bv = tape.leaf_from(&[ch], beta.clone(), true);
    let rmv = tape.leaf_from(&[b, ch, len], r.clone(), false);
    let mut rm_buf = rm.clone();
    let mut rv_buf = rv.clone();
    let y = tape.batchnorm(xv, gv, bv, &mut rm_buf, &mut rv_buf, 0.1, mode)?;
    let m = tape.mul(y, rmv)?;
    let loss = tape.sum(m);
    let g = tape.backward(loss)?;
    let analytic = vec![
        to64(g.get(xv).unwrap()),
        to64(g.get(gv).unwrap()),
        to64(g.get(bv).unwrap()),
    ];
    let (r64, rm64, rv64) = (to64(&r), to64(&rm), to64(&rv));
    let train = mode == Mode::Train;
    Ok(FdCase {
        name: if train { "batchnorm-train" } else { "batchnorm-eval" },
        params: vec![to64(&x), to64(&gamma), to64(&beta)],
        analytic,
        loss: Box::new(move |p| {
            let (x, gamma, beta) = (&p[0], &p[1], &p[2]);
            let (mean, var) = if train {
                naive_batch_stats(x, ch, len)
            } else {
                (rm64.clone(), rv64.clone())
            };
            naive_bn(x, gamma, beta, &mean, &var, ch, len)
                .iter()
                .zip(&r64)
                .map(|(y, r)| y * r)
                .sum()
        }),
    })
}

fn fd_relu(rng: &mut ChaCha8Rng) -> Result<FdCase> {
    let n = rng.gen_range(3..=12usize);
    // Keep inputs away from the kink at zero.
    let x: Vec<f32> = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.05..1.0f32);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let r = uni(rng, n, 0.5, 1.5);
    let mut tape = Tape::new();
    let xv = tape.leaf_from(&[n], x.clone(), true);
    let rv = tape.leaf_from(&[n], r.clone(), false);
    let y = tape.relu(xv);
    let m = tape.mul(y, rv)?;
    let loss = tape.sum(m);
    let g = tape.backward(loss)?;
    let analytic = vec![to64(g.get(xv).unwrap())];
    let r64 = to64(&r);
    Ok(FdCase {
        name: "relu",
        params: vec![to64(&x)],
        analytic,
        loss: Box::new(move |p| p[0].iter().zip(&r64).map(|(&x, r)| x.max(0.0) * r).sum()),
    })
}

fn naive_maxpool(x: &[f64], ch: usize, len: usize, window: usize) -> Vec<f64> {
    let batch = x.len() / (ch * len);
    let l_out = len / window;
    let mut out = vec![0.0; batch * ch * l_out];
    for bc in 0..batch * ch {
        for o in 0..l_out {
            let seg = &x[bc * len + o * window..bc * len + (o + 1) * window];
            out[bc * l_out + o] = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    out
}

fn fd_maxpool(rng: &mut ChaCha8Rng) -> Result<FdCase> {
    let b = rng.gen_range(1..=2usize);
    let ch = rng.gen_range(1..=3usize);
    let window = rng.gen_range(2..=3usize);
    let len = window * rng.gen_range(2..=4usize) + rng.gen_range(0..=1usize);
    let mut x = uni(rng, b * ch * len, -1.0, 1.0);
    // Separate each window's winner so ±step cannot flip the argmax.
    for bc in 0..b * ch {
        for o in 0..len / window {
            let seg = &mut x[bc * len + o * window..bc * len + (o + 1) * window];
            let top = (0..seg.len())
                .max_by(|&a, &b| seg[a].partial_cmp(&seg[b]).unwrap())
                .unwrap();
            seg[top] += 0.1;
        }
    }
    let l_out = len / window;
    let r = uni(rng, b * ch * l_out, 0.5, 1.5);
    let mut tape = Tape::new();
    let xv = tape.leaf_from(&[b, ch, len], x.clone(), true);
    let rv = tape.leaf_from(&[b, ch, l_out], r.clone(), false);
    let y = tape.maxpool1d(xv, window)?;
    let m = tape.mul(y, rv)?;
    let loss = tape.sum(m);
    let g = tape.backward(loss)?;
    let analytic = vec![to64(g.get(xv).unwrap())];
    let r64 = to64(&r);
    Ok(FdCase {
        name: "maxpool",
        params: vec![to64(&x)],
        analytic,
        loss: Box::new(move |p| {
            naive_maxpool(&p[0], ch, len, window)
                .iter()
                .zip(&r64)
                .map(|(y, r)| y * r)
                .sum()
        }),
    })
}

fn fd_dropout(rng: &mut ChaCha8Rng) -> Result<FdCase> {
    let n = rng.gen_range(4..=12usize);
    let p = if rng.gen_bool(0.5) { 0.25 } else { 0.5 };
    // Nonzero inputs so the kept/dropped pattern is readable off the output.
    let x: Vec<f32> = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.0f32);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let r = uni(rng, n, 0.5, 1.5);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut tape = Tape::new();
    let xv = tape.leaf_from(&[n], x.clone(), true);
    let rv = tape.leaf_from(&[n], r.clone(), false);
    let y = tape.dropout(xv, p, &mut drop_rng)?;
    let mask: Vec<f64> = tape.data(y).iter().map(|&v| f64::from(v != 0.0)).collect();
    let m = tape.mul(y, rv)?;
    let loss = tape.sum(m);
    let g = tape.backward(loss)?;
    let analytic = vec![to64(g.get(xv).unwrap())];
    let r64 = to64(&r);
    let scale = 1.0 / (1.0 - f64::from(p));
    Ok(FdCase {
        name: "dropout-train",
        params: vec![to64(&x)],
        analytic,
        loss: Box::new(move |p| {
            p[0].iter()
                .zip(&mask)
                .zip(&r64)
                .map(|((&x, m), r)| x * m * scale * r)
                .sum()
        }),
    })
}

fn naive_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|&v| v / s).collect()
}

fn fd_softmax(rng: &mut ChaCha8Rng) -> Result<FdCase> {
    let b = rng.gen_range(1..=3usize);
    let k = rng.gen_range(2..=5usize);
    let x = uni(rng, b * k, -2.0, 2.0);
    let r = uni(rng, b * k, 0.5, 1.5);
    let mut tape = Tape::new();
    let xv = tape.leaf_from(&[b, k], x.clone(), true);
    let rv = tape.leaf_from(&[b, k], r.clone(), false);
    let y = tape.softmax(xv)?;
    let m = tape.mul(y, rv)?;
    let loss = tape.sum(m);
    let g = tape.backward(loss)?;
    let analytic = vec![to64(g.get(xv).unwrap())];
    let r64 = to64(&r);
    Ok(FdCase {
        name: "softmax",
        params: vec![to64(&x)],
        analytic,
        loss: Box::new(move |p| {
            let mut s = 0.0;
            for bi in 0..b {
                let row = naive_softmax_row(&p[0][bi * k..(bi + 1) * k]);
                for (v, r) in row.iter().zip(&r64[bi * k..(bi + 1) * k]) {
                    s += v * r;
                }
            }
            s
        }),
    })
}

fn naive_cross_entropy(logits: &[f64], targets: &[u32], k: usize) -> f64 {
    let batch = targets.len();
    let mut loss = 0.0;
    for (bi, &t) in targets.iter().enumerate() {
        let row = &logits[bi * k..(bi + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
        loss += lse - row[t as usize];
    }
    loss / batch as f64
}

fn fd_cross_entropy(rng: &mut ChaCha8Rng) -> Result<FdCase> {
    let b = rng.gen_range(1..=4usize);
    let k = rng.gen_range(2..=5usize);
    let x = uni(rng, b * k, -2.0, 2.0);
    let targets: Vec<u32> = (0..b).map(|_| rng.gen_range(0..k as u32)).collect();
    let mut tape = Tape::new();
    let xv = tape.leaf_from(&[b, k], x.clone(), true);
    let loss = tape.cross_entropy(xv, &targets)?;
    let g = tape.backward(loss)?;
    let analytic = vec![to64(g.get(xv).unwrap())];
    Ok(FdCase {
        name: "cross-entropy",
        params: vec![to64(&x)],
        analytic,
        loss: Box::new(move |p| naive_cross_entropy(&p[0], &targets, k)),
    })
}

fn naive_bce(probs: &[f64], targets: &[f64]) -> f64 {
    let clamp = f64::from(BCE_CLAMP);
    let mut loss = 0.0;
    for (&p, &t) in probs.iter().zip(targets) {
        let q = p.clamp(clamp, 1.0 - clamp);
        loss -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
    }
    loss / probs.len() as f64
}

fn fd_sigmoid_bce(rng: &mut ChaCha8Rng) -> Result<FdCase> {
    let n = rng.gen_range(2..=8usize);
    // Moderate logits keep the probability clamp inactive.
    let x = uni(rng, n, -3.0, 3.0);
    let targets: Vec<f32> = (0..n).map(|_| f32::from(rng.gen_bool(0.5) as u8)).collect();
    let mut tape = Tape::new();
    let xv = tape.leaf_from(&[n], x.clone(), true);
    let pv = tape.sigmoid(xv);
    let loss = tape.binary_cross_entropy(pv, &targets)?;
    let g = tape.backward(loss)?;
    let analytic = vec![to64(g.get(xv).unwrap())];
    let t64 = to64(&targets);
    Ok(FdCase {
        name: "sigmoid-bce",
        params: vec![to64(&x)],
        analytic,
        loss: Box::new(move |p| {
            let probs: Vec<f64> = p[0].iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
            naive_bce(&probs, &t64)
        }),
    })
}

fn fd_arithmetic(rng: &mut ChaCha8Rng) -> Result<FdCase> {
    let n = rng.gen_range(2..=10usize);
    let a = uni(rng, n, -1.0, 1.0);
    let b = uni(rng, n, -1.0, 1.0);
    let m = uni(rng, n, -1.0, 1.0);
    let mut tape = Tape::new();
    let av = tape.leaf_from(&[n], a.clone(), true);
    let bv = tape.leaf_from(&[n], b.clone(), true);
    let mv = tape.leaf_from(&[n], m.clone(), true);
    let s = tape.add(av, bv)?;
    let prod = tape.mul(s, mv)?;
    let scaled = tape.scale(prod, 1.7);
    let loss = tape.sum(scaled);
    let g = tape.backward(loss)?;
    let analytic = vec![
        to64(g.get(av).unwrap()),
        to64(g.get(bv).unwrap()),
        to64(g.get(mv).unwrap()),
    ];
    Ok(FdCase {
        name: "add-mul-scale-sum",
        params: vec![to64(&a), to64(&b), to64(&m)],
        analytic,
        loss: Box::new(move |p| {
            p[0].iter()
                .zip(&p[1])
                .zip(&p[2])
                .map(|((&a, &b), &m)| 1.7 * (a + b) * m)
                .sum()
        }),
    })
}

/// Whole-chain case: conv → batch-norm (train) → relu → pool → flatten →
/// affine → cross-entropy, gradients on every parameter. Redraws until the
/// relu inputs and pool margins stay clear of their kinks.
fn fd_composite(rng: &mut ChaCha8Rng) -> Result<FdCase> {
    for _ in 0..200 {
        let b = 2usize;
        let ci = 2usize;
        let len = rng.gen_range(8..=10usize);
        let co = rng.gen_range(2..=3usize);
        let kernel = rng.gen_range(2..=3usize);
        let l1 = len - kernel + 1;
        let l2 = l1 / 2;
        if l2 == 0 {
            continue;
        }
        let classes = 3usize;
        let x = uni(rng, b * ci * len, -1.0, 1.0);
        let w1 = uni(rng, co * ci * kernel, -0.8, 0.8);
        let b1 = uni(rng, co, -0.3, 0.3);
        let gamma = uni(rng, co, 0.5, 1.5);
        let beta = uni(rng, co, -0.3, 0.3);
        let w2 = uni(rng, classes * co * l2, -0.6, 0.6);
        let b2 = uni(rng, classes, -0.3, 0.3);
        let targets: Vec<u32> = (0..b).map(|_| rng.gen_range(0..classes as u32)).collect();

        let mut tape = Tape::new();
        let xv = tape.leaf_from(&[b, ci, len], x.clone(), false);
        let w1v = tape.leaf_from(&[co, ci, kernel], w1.clone(), true);
        let b1v = tape.leaf_from(&[co], b1.clone(), true);
        let gv = tape.leaf_from(&[co], gamma.clone(), true);
        let bev = tape.leaf_from(&[co], beta.clone(), true);
        let w2v = tape.leaf_from(&[classes, co * l2], w2.clone(), true);
        let b2v = tape.leaf_from(&[classes], b2.clone(), true);
        let conv = tape.conv1d(xv, w1v, b1v, 1, 1, 0)?;
        let mut rm = vec![0.0f32; co];
        let mut rv = vec![1.0f32; co];
        let bn = tape.batchnorm(conv, gv, bev, &mut rm, &mut rv, 0.1, Mode::Train)?;
        // Guard the relu kink.
        if tape.data(bn).iter().any(|v| v.abs() < 0.02) {
            continue;
        }
        let act = tape.relu(bn);
        // Guard the pool argmax: within each window the top value must lead
        // by a margin, unless the window is entirely inactive.
        let ad = tape.data(act);
        let mut risky = false;
        for bc in 0..b * co {
            for o in 0..l2 {
                let seg = &ad[bc * l1 + o * 2..bc * l1 + o * 2 + 2];
                let hi = seg[0].max(seg[1]);
                let lo = seg[0].min(seg[1]);
                if hi > 0.0 && hi - lo < 0.02 {
                    risky = true;
                }
            }
        }
        if risky {
            continue;
        }
        let pooled = tape.maxpool1d(act, 2)?;
        let flat = tape.reshape(pooled, &[b, co * l2])?;
        let logits = tape.affine(flat, w2v, b2v)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        let g = tape.backward(loss)?;
        let analytic = vec![
            to64(g.get(w1v).unwrap()),
            to64(g.get(b1v).unwrap()),
            to64(g.get(gv).unwrap()),
            to64(g.get(bev).unwrap()),
            to64(g.get(w2v).unwrap()),
            to64(g.get(b2v).unwrap()),
        ];
        let x64 = to64(&x);
        return Ok(FdCase {
            name: "composite-chain",
            params: vec![
                to64(&w1),
                to64(&b1),
                to64(&gamma),
                to64(&beta),
                to64(&w2),
                to64(&b2),
            ],
            analytic,
            loss: Box::new(move |p| {
                let (w1, b1, gamma, beta, w2, b2) = (&p[0], &p[1], &p[2], &p[3], &p[4], &p[5]);
                // conv
                let mut conv = vec![0.0f64; b * co * l1];
                for bi in 0..b {
                    for coo in 0..co {
                        let row = &mut conv[(bi * co + coo) * l1..(bi * co + coo + 1) * l1];
                        row.iter_mut().for_each(|v| *v = b1[coo]);
                        for cii in 0..ci {
                            naive_conv_accum(
                                row,
                                &x64[(bi * ci + cii) * len..(bi * ci + cii + 1) * len],
                                &w1[(coo * ci + cii) * kernel..(coo * ci + cii + 1) * kernel],
                                len,
                                1,
                                1,
                                0,
                            );
                        }
                    }
                }
                // batch-norm (train) + relu + pool
                let (mean, var) = naive_batch_stats(&conv, co, l1);
                let bn = naive_bn(&conv, gamma, beta, &mean, &var, co, l1);
                let act: Vec<f64> = bn.iter().map(|&v| v.max(0.0)).collect();
                let pooled = naive_maxpool(&act, co, l1, 2);
                // affine + cross-entropy
                let dim = co * l2;
                let mut logits = vec![0.0f64; b * classes];
                for bi in 0..b {
                    for cl in 0..classes {
                        let mut y = b2[cl];
                        for d in 0..dim {
                            y += pooled[bi * dim + d] * w2[cl * dim + d];
                        }
                        logits[bi * classes + cl] = y;
                    }
                }
                naive_cross_entropy(&logits, &targets, classes)
            }),
        });
    }
    Err(Error::contract(
        "could not draw a composite case clear of relu/pool kinks",
    ))
}

/// Runs every op's finite-difference case `rounds` times on fresh random
/// shapes and reports the worst relative disagreement.
pub fn gradient_battery(seed: u64, rounds: usize) -> Result<GradReport> {
    let builders: &[fn(&mut ChaCha8Rng) -> Result<FdCase>] = &[
        fd_affine,
        fd_conv,
        |rng| fd_batchnorm(rng, Mode::Train),
        |rng| fd_batchnorm(rng, Mode::Eval),
        fd_relu,
        fd_maxpool,
        fd_dropout,
        fd_softmax,
        fd_cross_entropy,
        fd_sigmoid_bce,
        fd_arithmetic,
        fd_composite,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport { cases: 0, coords: 0, max_rel: 0.0, ok: true };
    for _ in 0..rounds.max(1) {
        for build in builders {
            let case = build(&mut rng)?;
            let (coords, worst) = fd_check(&case);
            if worst >= FD_TOL {
                report.ok = false;
            }
            report.cases += 1;
            report.coords += coords;
            report.max_rel = report.max_rel.max(worst);
            if worst >= FD_TOL {
                return Err(Error::contract(format!(
                    "gradient mismatch in {}: relative error {worst:.2e}",
                    case.name
                )));
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Naive model forward (eval mode, f64)
// ---------------------------------------------------------------------------

/// Runs one sample through the model with plain double-precision loops,
/// returning every layer's output (the last entry is the logits; the output
/// activation is not applied). Eval mode: dropout is the identity and batch
/// norm uses running statistics.
pub fn naive_model_outputs(model: &ModelGraph, sample: &[f32]) -> Result<Vec<Vec<f64>>> {
    let expect: usize = model.input_shape.iter().product();
    if sample.len() != expect {
        return Err(Error::shape(format!(
            "sample has {} values, model wants {expect}",
            sample.len()
        )));
    }
    let mut shape = model.input_shape.clone();
    let mut cur = to64(sample);
    let mut outs = Vec::with_capacity(model.layers.len());
    for (i, l) in model.layers.iter().enumerate() {
        match &l.kind {
            LayerKind::Dense { n_out, n_in } | LayerKind::OutputDense { n_out, n_in } => {
                if shape != [*n_in] {
                    return Err(Error::shape(format!("layer {i}: expected [{n_in}]")));
                }
                let w = to64(&l.weight.as_ref().unwrap().data);
                let b = to64(&l.bias.as_ref().unwrap().data);
                let mut y = vec![0.0; *n_out];
                for (o, slot) in y.iter_mut().enumerate() {
                    let mut s = b[o];
                    for (ii, &x) in cur.iter().enumerate() {
                        s += w[o * n_in + ii] * x;
                    }
                    *slot = s;
                }
                cur = y;
                shape = vec![*n_out];
            }
            LayerKind::Conv1d { c_out, c_in, kernel, stride, dilation, padding } => {
                if shape.len() != 2 || shape[0] != *c_in {
                    return Err(Error::shape(format!("layer {i}: expected [{c_in}, L]")));
                }
                let len = shape[1];
                let l_out = Tape::conv1d_out_len(len, *kernel, *stride, *dilation, *padding)?;
                let w = to64(&l.weight.as_ref().unwrap().data);
                let b = to64(&l.bias.as_ref().unwrap().data);
                let mut y = vec![0.0; c_out * l_out];
                for co in 0..*c_out {
                    let row = &mut y[co * l_out..(co + 1) * l_out];
                    row.iter_mut().for_each(|v| *v = b[co]);
                    for ci in 0..*c_in {
                        naive_conv_accum(
                            row,
                            &cur[ci * len..(ci + 1) * len],
                            &w[(co * c_in + ci) * kernel..(co * c_in + ci + 1) * kernel],
                            len,
                            *stride,
                            *dilation,
                            *padding,
                        );
                    }
                }
                cur = y;
                shape = vec![*c_out, l_out];
            }
            LayerKind::BatchNorm { channels } => {
                if shape.is_empty() || shape[0] != *channels {
                    return Err(Error::shape(format!("layer {i}: expected {channels} channels")));
                }
                let len = if shape.len() == 2 { shape[1] } else { 1 };
                let gamma = to64(&l.gamma.as_ref().unwrap().data);
                let beta = to64(&l.beta.as_ref().unwrap().data);
                let rm = to64(l.running_mean.as_ref().unwrap());
                let rv = to64(l.running_var.as_ref().unwrap());
                cur = naive_bn(&cur, &gamma, &beta, &rm, &rv, *channels, len);
            }
            LayerKind::Relu => {
                cur.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            LayerKind::MaxPool { window } => {
                if shape.len() != 2 {
                    return Err(Error::shape(format!("layer {i}: pool expects [C, L]")));
                }
                cur = naive_maxpool(&cur, shape[0], shape[1], *window);
                shape = vec![shape[0], shape[1] / window];
            }
            LayerKind::Dropout { .. } => {}
            LayerKind::Flatten => {
                if shape.len() != 2 {
                    return Err(Error::shape(format!("layer {i}: flatten expects [C, L]")));
                }
                shape = vec![shape[0] * shape[1]];
            }
        }
        outs.push(cur.clone());
    }
    Ok(outs)
}

// ---------------------------------------------------------------------------
// Trim vs. zeroing equivalence
// ---------------------------------------------------------------------------

/// Draws a random valid dense/conv/batch-norm/flatten chain for equivalence
/// and rewind checks, with randomized parameters and running statistics.
pub fn random_chain_model(rng: &mut ChaCha8Rng) -> Result<ModelGraph> {
    for _ in 0..500 {
        let c0 = rng.gen_range(1..=3usize);
        let l0 = rng.gen_range(8..=20usize);
        let mut specs = Vec::new();
        for _ in 0..rng.gen_range(1..=2usize) {
            specs.push(LayerSpec::Conv1d {
                c_out: rng.gen_range(2..=4),
                kernel: rng.gen_range(1..=3),
                stride: rng.gen_range(1..=2),
                dilation: rng.gen_range(1..=2),
                padding: rng.gen_range(0..=1),
                prunable: true,
            });
            if rng.gen_bool(0.7) {
                specs.push(LayerSpec::BatchNorm);
            }
            if rng.gen_bool(0.8) {
                specs.push(LayerSpec::Relu);
            }
            if rng.gen_bool(0.4) {
                specs.push(LayerSpec::MaxPool { window: 2 });
            }
        }
        specs.push(LayerSpec::Flatten);
        for _ in 0..rng.gen_range(0..=2usize) {
            specs.push(LayerSpec::Dense { n_out: rng.gen_range(2..=6), prunable: true });
            if rng.gen_bool(0.5) {
                specs.push(LayerSpec::BatchNorm);
            }
            if rng.gen_bool(0.8) {
                specs.push(LayerSpec::Relu);
            }
            if rng.gen_bool(0.3) {
                specs.push(LayerSpec::Dropout { p: 0.2 });
            }
        }
        specs.push(LayerSpec::OutputDense { n_out: rng.gen_range(2..=4) });
        let seed = rng.gen();
        if let Ok(mut m) = build_model(&specs, &[c0, l0], OutputActivation::None, seed) {
            if m.validate().is_ok() {
                randomize_model(&mut m, rng);
                return Ok(m);
            }
        }
    }
    Err(Error::contract("could not draw a valid random chain"))
}

/// Re-randomizes every parameter and running statistic so oracles never see
/// fresh-initialization special cases (γ = 1, running stats 0/1, …).
pub fn randomize_model(model: &mut ModelGraph, rng: &mut ChaCha8Rng) {
    for l in &mut model.layers {
        for t in [&mut l.weight, &mut l.bias].into_iter().flatten() {
            for v in &mut t.data {
                *v = rng.gen_range(-0.9..0.9);
            }
        }
        if let Some(g) = &mut l.gamma {
            for v in &mut g.data {
                let mag = rng.gen_range(0.5..1.5);
                *v = if rng.gen_bool(0.8) { mag } else { -mag };
            }
        }
        if let Some(b) = &mut l.beta {
            for v in &mut b.data {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        if let Some(rm) = &mut l.running_mean {
            for v in rm.iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        if let Some(rv) = &mut l.running_var {
            for v in rv.iter_mut() {
                *v = rng.gen_range(0.5..1.5);
            }
        }
    }
}

/// Draws a plan that trims at least one unit from at least one layer.
pub fn random_plan(model: &ModelGraph, rng: &mut ChaCha8Rng) -> Result<TrimPlan> {
    let prunable = model.prunable_layers();
    for _ in 0..200 {
        let mut kept = BTreeMap::new();
        for &li in &prunable {
            if rng.gen_bool(0.25) {
                continue;
            }
            let n = model.layers[li].kind.unit_count().unwrap();
            if n < 2 {
                continue;
            }
            let keep_n = rng.gen_range(1..n);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            let mut keep: Vec<usize> = idx[..keep_n].to_vec();
            keep.sort_unstable();
            kept.insert(li, keep);
        }
        if !kept.is_empty() {
            return Ok(TrimPlan { kept });
        }
    }
    Err(Error::contract("model has no layer that can lose a unit"))
}

/// Full-size copy of `model` with every unit the plan drops silenced: its
/// incoming weights and bias are zeroed, and so are the scale and shift of a
/// directly following batch norm. The silenced units then output exactly
/// zero, so the network must behave like its trimmed counterpart.
pub fn zero_removed_units(model: &ModelGraph, plan: &TrimPlan) -> Result<ModelGraph> {
    let mut out = model.clone();
    for (&li, kept) in &plan.kept {
        let n = out.layers[li]
            .kind
            .unit_count()
            .ok_or_else(|| Error::contract(format!("layer {li} has no units")))?;
        let mut keep = vec![false; n];
        for &u in kept {
            if u >= n {
                return Err(Error::shape(format!("unit {u} out of range for layer {li}")));
            }
            keep[u] = true;
        }
        let followed = out.layers[li].followed_by_batchnorm;
        {
            let layer = &mut out.layers[li];
            let w = layer.weight.as_mut().unwrap();
            let per = w.data.len() / n;
            for (u, &k) in keep.iter().enumerate() {
                if !k {
                    w.data[u * per..(u + 1) * per].fill(0.0);
                }
            }
            let b = layer.bias.as_mut().unwrap();
            for (u, &k) in keep.iter().enumerate() {
                if !k {
                    b.data[u] = 0.0;
                }
            }
        }
        if followed {
            let bn = &mut out.layers[li + 1];
            for (u, &k) in keep.iter().enumerate() {
                if !k {
                    bn.gamma.as_mut().unwrap().data[u] = 0.0;
                    bn.beta.as_mut().unwrap().data[u] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Largest absolute difference between the trimmed model's outputs and the
/// zero-silenced full-size model's outputs over `inputs`, in eval mode.
pub fn trim_zero_gap(model: &ModelGraph, plan: &TrimPlan, inputs: &[Tensor]) -> Result<f64> {
    let mut trimmed = trim(model, plan)?;
    let mut zeroed = zero_removed_units(model, plan)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0.0f64;
    for input in inputs {
        let a = trimmed.forward(input, Mode::Eval, &mut rng)?;
        let b = zeroed.forward(input, Mode::Eval, &mut rng)?;
        if a.shape != b.shape {
            return Err(Error::contract("trimmed and zeroed outputs differ in shape"));
        }
        for (x, y) in a.data.iter().zip(&b.data) {
            worst = worst.max(f64::from((x - y).abs()));
        }
    }
    Ok(worst)
}

/// Random batch of inputs matching the model's input shape.
pub fn random_inputs(model: &ModelGraph, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let per: usize = model.input_shape.iter().product();
    let mut shape = vec![n];
    shape.extend_from_slice(&model.input_shape);
    Tensor::new(&shape, uni(rng, n * per, -1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Criterion and ranking oracles
// ---------------------------------------------------------------------------

/// Brute-force recomputation of per-unit summed absolute incoming weights.
pub fn magnitude_oracle(model: &ModelGraph) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut scores = BTreeMap::new();
    for li in model.prunable_layers() {
        let n = model.layers[li].kind.unit_count().unwrap();
        let w = &model.layers[li].weight.as_ref().unwrap().data;
        let per = w.len() / n;
        let mut s = vec![0.0f64; n];
        for (j, &v) in w.iter().enumerate() {
            s[j / per] += f64::from(v.abs());
        }
        scores.insert(li, s);
    }
    Ok(scores)
}

/// Brute-force recomputation of |γ| for each prunable layer's following norm.
pub fn batchnorm_oracle(model: &ModelGraph) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut scores = BTreeMap::new();
    for li in model.prunable_layers() {
        if !model.layers[li].followed_by_batchnorm {
            return Err(Error::contract(format!(
                "layer {li} has no batch norm to read scales from"
            )));
        }
        let g = &model.layers[li + 1].gamma.as_ref().unwrap().data;
        scores.insert(li, g.iter().map(|&v| f64::from(v.abs())).collect());
    }
    Ok(scores)
}

/// Brute-force recomputation of summed absolute post-activation outputs on a
/// holdout split, one naive double-precision forward pass per sample.
pub fn activation_oracle(model: &ModelGraph, holdout: &Split) -> Result<BTreeMap<usize, Vec<f64>>> {
    if holdout.n == 0 {
        return Err(Error::contract("activation oracle needs a non-empty holdout"));
    }
    let mut scores: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for s in 0..holdout.n {
        let outs = naive_model_outputs(model, holdout.sample(s))?;
        for li in model.prunable_layers() {
            let tap = model.activation_tap(li);
            let n = model.layers[li].kind.unit_count().unwrap();
            let data = &outs[tap];
            let len = data.len() / n;
            let acc = scores.entry(li).or_insert_with(|| vec![0.0f64; n]);
            for u in 0..n {
                for t in 0..len {
                    acc[u] += data[u * len + t].abs();
                }
            }
        }
    }
    Ok(scores)
}

/// Independent full-sort reimplementation of the keep decision.
pub fn rank_oracle(scores: &CriterionScores, rate: f64, scope: Scope) -> TrimPlan {
    let mut kept = BTreeMap::new();
    match scope {
        Scope::Local => {
            for (&li, s) in &scores.per_layer {
                let n = s.len();
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| {
                    s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b))
                });
                let keep = (((1.0 - rate) * n as f64).ceil() as usize).max(1);
                let mut k = order[..keep.min(n)].to_vec();
                k.sort_unstable();
                kept.insert(li, k);
            }
        }
        Scope::Global => {
            let mut pool: Vec<(f64, usize, usize)> = Vec::new();
            let mut remaining: BTreeMap<usize, usize> = BTreeMap::new();
            let mut total = 0usize;
            for (&li, s) in &scores.per_layer {
                let sum: f64 = s.iter().sum();
                for (u, &v) in s.iter().enumerate() {
                    let norm = if sum > 0.0 { v / sum } else { 0.0 };
                    pool.push((norm, li, u));
                }
                remaining.insert(li, s.len());
                total += s.len();
            }
            // Worst first: lowest normalized score, then later layers, then
            // higher unit indices.
            pool.sort_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .unwrap()
                    .then(b.1.cmp(&a.1))
                    .then(b.2.cmp(&a.2))
            });
            let want = (rate * total as f64).floor() as usize;
            let mut dropped: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            let mut n_dropped = 0;
            for &(_, li, u) in &pool {
                if n_dropped == want {
                    break;
                }
                if remaining[&li] <= 1 {
                    continue;
                }
                *remaining.get_mut(&li).unwrap() -= 1;
                dropped.entry(li).or_default().push(u);
                n_dropped += 1;
            }
            for (&li, s) in &scores.per_layer {
                let gone = dropped.remove(&li).unwrap_or_default();
                let k: Vec<usize> = (0..s.len()).filter(|u| !gone.contains(u)).collect();
                kept.insert(li, k);
            }
        }
    }
    TrimPlan { kept }
}

// ---------------------------------------------------------------------------
// Rewind oracle
// ---------------------------------------------------------------------------

/// Builds the model a correct rewind must produce: the snapshot trimmed
/// straight down to the model's surviving coordinates (one shot, using the
/// provenance lists the model carries), statistics reset, mask applied.
pub fn expected_rewound(model: &ModelGraph, snapshot: &RewindSnapshot) -> Result<ModelGraph> {
    let mut plan = TrimPlan { kept: BTreeMap::new() };
    for li in model.prunable_layers() {
        if let Some(kept) = &model.layers[li].kept {
            plan.kept.insert(li, kept.iter().map(|&u| u as usize).collect());
        }
    }
    let mut expect = if plan.kept.is_empty() {
        snapshot.model.clone()
    } else {
        trim(&snapshot.model, &plan)?
    };
    for l in &mut expect.layers {
        if let Some(rm) = &mut l.running_mean {
            rm.fill(0.0);
        }
        if let Some(rv) = &mut l.running_var {
            rv.fill(1.0);
        }
    }
    expect.mask = model.mask.clone();
    expect.apply_mask();
    Ok(expect)
}

/// Counts bitwise parameter disagreements (weights, biases, scales, shifts)
/// between two models of identical topology.
pub fn param_mismatches(a: &ModelGraph, b: &ModelGraph) -> Result<u64> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::contract("models differ in depth"));
    }
    let mut mismatches = 0u64;
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        for (ta, tb) in [
            (&la.weight, &lb.weight),
            (&la.bias, &lb.bias),
            (&la.gamma, &lb.gamma),
            (&la.beta, &lb.beta),
        ] {
            match (ta, tb) {
                (None, None) => {}
                (Some(x), Some(y)) => {
                    if x.shape != y.shape {
                        return Err(Error::contract("models differ in tensor shapes"));
                    }
                    mismatches += x
                        .data
                        .iter()
                        .zip(&y.data)
                        .filter(|(p, q)| p.to_bits() != q.to_bits())
                        .count() as u64;
                }
                _ => return Err(Error::contract("models differ in tensor presence")),
            }
        }
    }
    Ok(mismatches)
}

/// Fast self-check bundling one pass of every oracle family, for the
/// command-line `verify` verb. Returns one human-readable line per check;
/// any disagreement comes back as an error instead.
pub fn quick_suite(seed: u64, rounds: usize) -> Result<Vec<String>> {
    let mut lines = Vec::new();

    let report = gradient_battery(seed, rounds)?;
    lines.push(format!(
        "gradients: {} cases, {} partial derivatives, max relative error {:.2e}",
        report.cases, report.coords, report.max_rel
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut gap = 0.0f64;
    for _ in 0..10 {
        let m = random_chain_model(&mut rng)?;
        let plan = random_plan(&m, &mut rng)?;
        let inputs = random_inputs(&m, 4, &mut rng)?;
        gap = gap.max(trim_zero_gap(&m, &plan, std::slice::from_ref(&inputs))?);
    }
    if gap >= 1e-5 {
        return Err(Error::contract(format!(
            "trimmed and zero-masked networks disagree by {gap:.2e}"
        )));
    }
    lines.push(format!(
        "trim vs zero-mask: 10 random chains, max output gap {gap:.2e}"
    ));

    for _ in 0..5 {
        let m = random_chain_model(&mut rng)?;
        let mut scores = CriterionScores {
            criterion: Criterion::Magnitude,
            per_layer: magnitude_oracle(&m)?,
        };
        // Coarsen to force ties, then compare both scopes against the oracle.
        for s in scores.per_layer.values_mut() {
            for v in s {
                *v = (*v * 2.0).round();
            }
        }
        for scope in [Scope::Local, Scope::Global] {
            let got = crate::lottery::rank_units(&scores, 0.37, scope)?;
            if got != rank_oracle(&scores, 0.37, scope) {
                return Err(Error::contract("ranking disagrees with the full-sort oracle"));
            }
        }
    }
    lines.push("ranking: matches the full-sort oracle under ties, both scopes".to_string());

    for _ in 0..5 {
        let m = random_chain_model(&mut rng)?;
        let mut snap_model = m.clone();
        randomize_model(&mut snap_model, &mut rng);
        let snapshot = RewindSnapshot { model: snap_model, epoch: 1 };
        let plan = random_plan(&m, &mut rng)?;
        let mut t = trim(&m, &plan)?;
        randomize_model(&mut t, &mut rng);
        crate::lottery::rewind(&mut t, &snapshot)?;
        let expect = expected_rewound(&t, &snapshot)?;
        let bad = param_mismatches(&t, &expect)?;
        if bad != 0 {
            return Err(Error::contract(format!(
                "rewind left {bad} parameters off the snapshot values"
            )));
        }
    }
    lines.push("rewind: surviving parameters bitwise equal the snapshot, 5 random chains".to_string());

    Ok(lines)
}
