//! Unstructured magnitude masking.
//!
//! The masking baseline never changes tensor shapes: each iteration it
//! freezes the smallest-magnitude fraction of the still-free weights at
//! zero. Local scope cuts within each weight tensor; global scope pools
//! every weight in the model into one ranking. Masks only ever grow — a
//! zeroed weight stays zeroed — and the per-iteration removal count is
//! `floor(rate · remaining)`, so the surviving count after `i` iterations
//! is the exact i-fold floor composition of `(1 − rate)` fractions.
//!
//! Weight tensors (dense and conv) are maskable; biases and batch-norm
//! parameters are not.

use super::rank::Scope;
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ModelMask};

/// Returns the next mask: `mask` with the lowest-magnitude fraction `rate`
/// of the still-unmasked weights of `model` zeroed out. Ties drop the
/// later layer and higher flat index first, so equal-magnitude weights at
/// lower positions survive longer.
pub fn update_mask(
    model: &ModelGraph,
    mask: &ModelMask,
    rate: f64,
    scope: Scope,
) -> Result<ModelMask> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::range(format!(
            "prune rate must lie strictly between 0 and 1, got {rate}"
        )));
    }
    if mask.layers.len() != model.layers.len() {
        return Err(Error::contract("mask does not match the model's layers"));
    }
    for (i, (layer, m)) in model.layers.iter().zip(&mask.layers).enumerate() {
        match (&layer.weight, m) {
            (Some(w), Some(m)) if w.len() == m.len() => {}
            (None, None) => {}
            _ => {
                return Err(Error::contract(format!(
                    "mask shape mismatch at layer {i}"
                )))
            }
        }
    }
    let mut next = mask.clone();
    match scope {
        Scope::Local => {
            for (i, layer) in model.layers.iter().enumerate() {
                let Some(w) = &layer.weight else { continue };
                let m = next.layers[i].as_mut().unwrap();
                let free: Vec<usize> = (0..m.len()).filter(|&j| m[j] != 0.0).collect();
                let cut = (rate * free.len() as f64).floor() as usize;
                for &j in worst(&free, |j| (w.data[j].abs(), usize::MAX - i, usize::MAX - j))
                    .iter()
                    .take(cut)
                {
                    m[j] = 0.0;
                }
            }
        }
        Scope::Global => {
            let mut free: Vec<(usize, usize)> = Vec::new();
            for (i, m) in next.layers.iter().enumerate() {
                if let Some(m) = m {
                    free.extend((0..m.len()).filter(|&j| m[j] != 0.0).map(|j| (i, j)));
                }
            }
            let cut = (rate * free.len() as f64).floor() as usize;
            let order = worst(&free, |(i, j)| {
                (
                    model.layers[i].weight.as_ref().unwrap().data[j].abs(),
                    usize::MAX - i,
                    usize::MAX - j,
                )
            });
            for &(i, j) in order.iter().take(cut) {
                next.layers[i].as_mut().unwrap()[j] = 0.0;
            }
        }
    }
    Ok(next)
}

/// Sorts items worst-first by a `(magnitude, inverted layer, inverted index)`
/// key: ascending magnitude, with ties dropping later layers and higher
/// indices before earlier ones (the inverted fields encode that directly).
fn worst<T: Copy>(items: &[T], key: impl Fn(T) -> (f32, usize, usize)) -> Vec<T> {
    let mut v: Vec<T> = items.to_vec();
    v.sort_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap());
    v
}

/// Number of unmasked weights left after applying `iterations` rounds of
/// `floor(rate · remaining)` removal to `start` weights — the schedule's
/// exact arithmetic, used by tests and reports.
pub fn floor_schedule(start: usize, rate: f64, iterations: usize) -> usize {
    let mut left = start;
    for _ in 0..iterations {
        left -= (rate * left as f64).floor() as usize;
    }
    left
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_model, LayerSpec, OutputActivation};

    fn two_dense() -> ModelGraph {
        build_model(
            &[
                LayerSpec::Dense { n_out: 10, prunable: true },
                LayerSpec::Relu,
                LayerSpec::OutputDense { n_out: 10 },
            ],
            &[10],
            OutputActivation::None,
            0,
        )
        .unwrap()
    }

    #[test]
    fn rate_point_three_leaves_seventy_of_one_hundred() {
        let m = two_dense(); // layer 0 weight: 10×10 = 100 entries
        let mask = ModelMask::ones(&m);
        let next = update_mask(&m, &mask, 0.3, Scope::Local).unwrap();
        let l0 = next.layers[0].as_ref().unwrap();
        assert_eq!(l0.iter().filter(|&&v| v != 0.0).count(), 70);
    }

    #[test]
    fn masked_weights_never_return() {
        let m = two_dense();
        let mut mask = ModelMask::ones(&m);
        for _ in 0..6 {
            let next = update_mask(&m, &mask, 0.3, Scope::Global).unwrap();
            for (a, b) in mask.layers.iter().flatten().zip(next.layers.iter().flatten()) {
                for (x, y) in a.iter().zip(b) {
                    assert!(!(*x == 0.0 && *y != 0.0), "a masked weight unmasked");
                }
            }
            mask = next;
        }
    }

    #[test]
    fn fifteen_iterations_reach_half_a_percent() {
        // Large enough that the floor schedule doesn't stall: tiny pools
        // stop shrinking once floor(rate·n) hits zero.
        let m = build_model(
            &[
                LayerSpec::Dense { n_out: 100, prunable: true },
                LayerSpec::Relu,
                LayerSpec::OutputDense { n_out: 100 },
            ],
            &[100],
            OutputActivation::None,
            0,
        )
        .unwrap();
        let mut mask = ModelMask::ones(&m);
        let total = mask.total();
        for _ in 0..15 {
            mask = update_mask(&m, &mask, 0.3, Scope::Global).unwrap();
        }
        let left = total - mask.zero_count();
        assert_eq!(left, floor_schedule(total, 0.3, 15));
        assert!(
            (left as f64) / (total as f64) <= 0.005,
            "{left} of {total} left"
        );
    }

    #[test]
    fn local_composition_is_exact_per_tensor() {
        let m = two_dense();
        let mut mask = ModelMask::ones(&m);
        for _ in 0..4 {
            mask = update_mask(&m, &mask, 0.3, Scope::Local).unwrap();
        }
        for layer in mask.layers.iter().flatten() {
            let left = layer.iter().filter(|&&v| v != 0.0).count();
            assert_eq!(left, floor_schedule(100, 0.3, 4));
        }
    }

    #[test]
    fn local_cut_matches_full_sort_per_layer() {
        let mut m = two_dense();
        // Distinct magnitudes so the cut is unambiguous.
        for (i, v) in m.layers[0].weight.as_mut().unwrap().data.iter_mut().enumerate() {
            *v = ((i * 37) % 100) as f32 / 100.0 + 0.01;
        }
        let mask = ModelMask::ones(&m);
        let next = update_mask(&m, &mask, 0.3, Scope::Local).unwrap();
        let w = &m.layers[0].weight.as_ref().unwrap().data;
        let mut order: Vec<usize> = (0..w.len()).collect();
        order.sort_by(|&a, &b| w[a].abs().partial_cmp(&w[b].abs()).unwrap());
        let m0 = next.layers[0].as_ref().unwrap();
        for &j in &order[..30] {
            assert_eq!(m0[j], 0.0);
        }
        for &j in &order[30..] {
            assert_eq!(m0[j], 1.0);
        }
    }

    #[test]
    fn ties_drop_higher_indices_first() {
        let mut m = two_dense();
        m.layers[0].weight.as_mut().unwrap().data.fill(0.5);
        m.layers[2].weight.as_mut().unwrap().data.fill(0.5);
        let mask = ModelMask::ones(&m);
        // Global pool: 200 equal weights, cut 60 → the 60 highest (layer,
        // index) pairs go: all of the head's indices 40..100.
        let next = update_mask(&m, &mask, 0.3, Scope::Global).unwrap();
        let l0 = next.layers[0].as_ref().unwrap();
        let l2 = next.layers[2].as_ref().unwrap();
        assert!(l0.iter().all(|&v| v == 1.0));
        assert_eq!(l2.iter().filter(|&&v| v == 0.0).count(), 60);
        assert!(l2[40..].iter().all(|&v| v == 0.0));
        assert!(l2[..40].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn global_scope_can_clear_one_layer_entirely() {
        let mut m = two_dense();
        // Layer 0 weights tiny, head weights large: global masking eats
        // layer 0 first — there is no per-layer floor for masks.
        m.layers[0].weight.as_mut().unwrap().data.fill(0.001);
        m.layers[2].weight.as_mut().unwrap().data.fill(1.0);
        let mut mask = ModelMask::ones(&m);
        for _ in 0..2 {
            mask = update_mask(&m, &mask, 0.3, Scope::Global).unwrap();
        }
        // Cut 60 of 200, then 42 of 140: layer 0's hundred tiny weights all
        // go, and the last two cuts spill into the head's highest indices.
        assert!(mask.layers[0].as_ref().unwrap().iter().all(|&v| v == 0.0));
        let head = mask.layers[2].as_ref().unwrap();
        assert_eq!(head.iter().filter(|&&v| v == 0.0).count(), 2);
        assert_eq!(head[98], 0.0);
        assert_eq!(head[99], 0.0);
    }

    #[test]
    fn floor_schedule_matches_hand_values() {
        assert_eq!(floor_schedule(100, 0.3, 1), 70);
        assert_eq!(floor_schedule(100, 0.3, 2), 49);
        assert_eq!(floor_schedule(10, 0.3, 1), 7);
        assert_eq!(floor_schedule(7, 0.3, 1), 5); // 7 − floor(2.1) = 5
        assert_eq!(floor_schedule(5, 0.3, 1), 4);
        // Tiny pools stall once floor(rate·n) hits zero.
        assert_eq!(floor_schedule(3, 0.3, 10), 3);
    }

    #[test]
    fn mismatched_mask_is_rejected() {
        let m = two_dense();
        let other = build_model(
            &[
                LayerSpec::Dense { n_out: 4, prunable: true },
                LayerSpec::Relu,
                LayerSpec::OutputDense { n_out: 2 },
            ],
            &[10],
            OutputActivation::None,
            0,
        )
        .unwrap();
        let mask = ModelMask::ones(&other);
        assert!(update_mask(&m, &mask, 0.3, Scope::Local).is_err());
    }
}
