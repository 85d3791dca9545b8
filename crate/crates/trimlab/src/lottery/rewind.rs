//! Rewinding surviving parameters to their snapshot values.
//!
//! A [`RewindSnapshot`] holds the *full-size* model as it stood after `k`
//! training epochs. Rewinding maps every surviving parameter of a (possibly
//! repeatedly) trimmed model back to its value in that snapshot, using the
//! provenance lists each layer carries: row indices come from the layer's
//! own `kept` list, column indices from the upstream layer's, expanded
//! through flatten layers exactly as trimming contracted them. Masked
//! models rewind to `W_k ⊙ M`. Batch-norm running statistics are reset —
//! they are estimates of a distribution the rewound network no longer
//! produces — and the caller starts a fresh optimizer.

use crate::error::{Error, Result};
use crate::graph::{LayerKind, ModelGraph};
use crate::train::RewindSnapshot;

/// Rewinds `model`'s parameters to their values in `snapshot`.
pub fn rewind(model: &mut ModelGraph, snapshot: &RewindSnapshot) -> Result<()> {
    let snap = &snapshot.model;
    if model.layers.len() != snap.layers.len() {
        return Err(Error::contract(format!(
            "cannot rewind a {}-layer model to a {}-layer snapshot",
            model.layers.len(),
            snap.layers.len()
        )));
    }
    if model.input_shape != snap.input_shape
        || model.output_activation != snap.output_activation
    {
        return Err(Error::contract(
            "snapshot input shape or output activation differs from the model",
        ));
    }
    // The snapshot must be an untrimmed model: full provenance everywhere.
    for (i, l) in snap.layers.iter().enumerate() {
        if let Some(kept) = &l.kept {
            if kept.iter().enumerate().any(|(j, &u)| u != j as u32) {
                return Err(Error::contract(format!(
                    "snapshot layer {i} is itself trimmed; rewind needs full-size snapshots"
                )));
            }
        }
    }
    let snap_trace = snap.shape_trace()?;
    // Original indices feeding each layer's input dimension; None = identity.
    let mut col_prov: Option<Vec<usize>> = None;
    for i in 0..model.layers.len() {
        let kind = model.layers[i].kind.clone();
        let snap_layer = &snap.layers[i];
        let mismatch = |what: &str| {
            Err(Error::contract(format!(
                "layer {i}: snapshot {what} does not match the model",
            )))
        };
        match (&kind, &snap_layer.kind) {
            (
                LayerKind::Dense { n_out, n_in },
                LayerKind::Dense {
                    n_out: s_out,
                    n_in: s_in,
                },
            )
            | (
                LayerKind::OutputDense { n_out, n_in },
                LayerKind::OutputDense {
                    n_out: s_out,
                    n_in: s_in,
                },
            ) => {
                let rows = provenance(&model.layers[i], *n_out, *s_out, i)?;
                let cols = resolve(&col_prov, *n_in, *s_in, i)?;
                let sw = &snap_layer.weight.as_ref().unwrap().data;
                let sb = &snap_layer.bias.as_ref().unwrap().data;
                {
                    let w = &mut model.layers[i].weight.as_mut().unwrap().data;
                    for (ri, &r) in rows.iter().enumerate() {
                        for (ci, &c) in cols.iter().enumerate() {
                            w[ri * n_in + ci] = sw[r * s_in + c];
                        }
                    }
                }
                let b = &mut model.layers[i].bias.as_mut().unwrap().data;
                for (ri, &r) in rows.iter().enumerate() {
                    b[ri] = sb[r];
                }
                col_prov = Some(rows);
            }
            (
                LayerKind::Conv1d {
                    c_out,
                    c_in,
                    kernel,
                    stride,
                    dilation,
                    padding,
                },
                LayerKind::Conv1d {
                    c_out: s_out,
                    c_in: s_in,
                    kernel: sk,
                    stride: ss,
                    dilation: sd,
                    padding: sp,
                },
            ) => {
                if kernel != sk || stride != ss || dilation != sd || padding != sp {
                    return mismatch("convolution geometry");
                }
                let rows = provenance(&model.layers[i], *c_out, *s_out, i)?;
                let cols = resolve(&col_prov, *c_in, *s_in, i)?;
                let sw = &snap_layer.weight.as_ref().unwrap().data;
                let sb = &snap_layer.bias.as_ref().unwrap().data;
                {
                    let w = &mut model.layers[i].weight.as_mut().unwrap().data;
                    for (ri, &r) in rows.iter().enumerate() {
                        for (ci, &c) in cols.iter().enumerate() {
                            let dst = (ri * c_in + ci) * kernel;
                            let src = (r * s_in + c) * kernel;
                            w[dst..dst + kernel].copy_from_slice(&sw[src..src + kernel]);
                        }
                    }
                }
                let b = &mut model.layers[i].bias.as_mut().unwrap().data;
                for (ri, &r) in rows.iter().enumerate() {
                    b[ri] = sb[r];
                }
                col_prov = Some(rows);
            }
            (LayerKind::BatchNorm { channels }, LayerKind::BatchNorm { channels: sc }) => {
                let chans = resolve(&col_prov, *channels, *sc, i)?;
                let sg = &snap_layer.gamma.as_ref().unwrap().data;
                let sb = &snap_layer.beta.as_ref().unwrap().data;
                let l = &mut model.layers[i];
                for (ci, &c) in chans.iter().enumerate() {
                    l.gamma.as_mut().unwrap().data[ci] = sg[c];
                    l.beta.as_mut().unwrap().data[ci] = sb[c];
                }
                l.running_mean.as_mut().unwrap().fill(0.0);
                l.running_var.as_mut().unwrap().fill(1.0);
            }
            (LayerKind::Relu, LayerKind::Relu) | (LayerKind::Flatten, LayerKind::Flatten) => {
                if kind == LayerKind::Flatten {
                    if let Some(chans) = col_prov.take() {
                        let len = snap_trace[i][1];
                        col_prov = Some(
                            chans
                                .iter()
                                .flat_map(|&c| (c * len)..(c * len + len))
                                .collect(),
                        );
                    }
                }
            }
            (LayerKind::MaxPool { window }, LayerKind::MaxPool { window: sw }) => {
                if window != sw {
                    return mismatch("pool window");
                }
            }
            (LayerKind::Dropout { p }, LayerKind::Dropout { p: sp }) => {
                if p != sp {
                    return mismatch("dropout probability");
                }
            }
            _ => return mismatch("layer kind"),
        }
    }
    // Masked strategies rewind to the snapshot *through* the mask.
    model.apply_mask();
    Ok(())
}

/// A layer's own kept-unit provenance as indices into the snapshot.
fn provenance(layer: &crate::graph::Layer, width: usize, snap_width: usize, i: usize) -> Result<Vec<usize>> {
    let kept = layer
        .kept
        .as_ref()
        .ok_or_else(|| Error::contract(format!("layer {i} has no unit provenance")))?;
    if kept.len() != width {
        return Err(Error::contract(format!(
            "layer {i}: provenance covers {} of {width} units",
            kept.len()
        )));
    }
    let out: Vec<usize> = kept.iter().map(|&u| u as usize).collect();
    if out.iter().any(|&u| u >= snap_width) {
        return Err(Error::contract(format!(
            "layer {i}: provenance exceeds the snapshot width {snap_width}"
        )));
    }
    Ok(out)
}

/// Input-side provenance: the upstream keep list, or identity when nothing
/// upstream was ever trimmed.
fn resolve(prov: &Option<Vec<usize>>, width: usize, snap_width: usize, i: usize) -> Result<Vec<usize>> {
    let cols = match prov {
        Some(p) => p.clone(),
        None => (0..snap_width).collect(),
    };
    if cols.len() != width {
        return Err(Error::contract(format!(
            "layer {i}: input provenance covers {} of {width} inputs",
            cols.len()
        )));
    }
    if cols.iter().any(|&c| c >= snap_width) {
        return Err(Error::contract(format!(
            "layer {i}: input provenance exceeds the snapshot width {snap_width}"
        )));
    }
    Ok(cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_model, LayerSpec, ModelMask, OutputActivation};
    use crate::lottery::rank::TrimPlan;
    use crate::lottery::trim::trim;

    /// Gives every weight/bias/γ/β a distinct, position-coded value so
    /// provenance mistakes cannot cancel out.
    fn tag_params(m: &mut ModelGraph) {
        for (li, l) in m.layers.iter_mut().enumerate() {
            let base = 1000.0 * (li + 1) as f32;
            if let Some(w) = &mut l.weight {
                for (i, v) in w.data.iter_mut().enumerate() {
                    *v = base + i as f32;
                }
            }
            if let Some(b) = &mut l.bias {
                for (i, v) in b.data.iter_mut().enumerate() {
                    *v = base + 500.0 + i as f32;
                }
            }
            if let Some(g) = &mut l.gamma {
                for (i, v) in g.data.iter_mut().enumerate() {
                    *v = base + 700.0 + i as f32;
                }
            }
            if let Some(be) = &mut l.beta {
                for (i, v) in be.data.iter_mut().enumerate() {
                    *v = base + 800.0 + i as f32;
                }
            }
        }
    }

    fn conv_chain() -> ModelGraph {
        build_model(
            &[
                LayerSpec::Conv1d { c_out: 4, kernel: 3, stride: 1, dilation: 1, padding: 0, prunable: true },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Flatten, // [4, 3] -> 12
                LayerSpec::Dense { n_out: 6, prunable: true },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::OutputDense { n_out: 2 },
            ],
            &[1, 8],
            OutputActivation::None,
            0,
        )
        .unwrap()
    }

    fn scramble(m: &mut ModelGraph) {
        for l in &mut m.layers {
            for t in [&mut l.weight, &mut l.bias, &mut l.gamma, &mut l.beta].into_iter().flatten() {
                for v in &mut t.data {
                    *v = -999.0;
                }
            }
            if let Some(rm) = &mut l.running_mean {
                rm.fill(3.0);
            }
            if let Some(rv) = &mut l.running_var {
                rv.fill(7.0);
            }
        }
    }

    #[test]
    fn untrimmed_rewind_restores_everything_bitwise() {
        let mut snap_model = conv_chain();
        tag_params(&mut snap_model);
        let snapshot = RewindSnapshot { model: snap_model.clone(), epoch: 5 };
        let mut m = snap_model.clone();
        scramble(&mut m);
        rewind(&mut m, &snapshot).unwrap();
        for (l, sl) in m.layers.iter().zip(&snap_model.layers) {
            assert_eq!(l.weight, sl.weight);
            assert_eq!(l.bias, sl.bias);
            assert_eq!(l.gamma, sl.gamma);
            assert_eq!(l.beta, sl.beta);
            if let Some(rm) = &l.running_mean {
                assert!(rm.iter().all(|&v| v == 0.0));
                assert!(l.running_var.as_ref().unwrap().iter().all(|&v| v == 1.0));
            }
        }
    }

    #[test]
    fn trimmed_rewind_maps_provenance_exactly() {
        let mut full = conv_chain();
        tag_params(&mut full);
        let snapshot = RewindSnapshot { model: full.clone(), epoch: 3 };
        let plan = TrimPlan {
            kept: [(0usize, vec![1usize, 3]), (5, vec![0, 2, 5])].into_iter().collect(),
        };
        let mut t = trim(&full, &plan).unwrap();
        scramble(&mut t);
        rewind(&mut t, &snapshot).unwrap();

        // Conv layer: rows {1,3}, single input channel.
        let w0 = &t.layers[0].weight.as_ref().unwrap().data;
        let s0 = &full.layers[0].weight.as_ref().unwrap().data;
        for (ri, &r) in [1usize, 3].iter().enumerate() {
            for k in 0..3 {
                assert_eq!(w0[ri * 3 + k], s0[r * 3 + k]);
            }
            assert_eq!(
                t.layers[0].bias.as_ref().unwrap().data[ri],
                full.layers[0].bias.as_ref().unwrap().data[r]
            );
        }
        // Its batch norm follows the same channels.
        for (ci, &c) in [1usize, 3].iter().enumerate() {
            assert_eq!(
                t.layers[1].gamma.as_ref().unwrap().data[ci],
                full.layers[1].gamma.as_ref().unwrap().data[c]
            );
        }
        // Dense after flatten: columns are channel blocks {1,3} × length 3.
        let w5 = &t.layers[5].weight.as_ref().unwrap().data;
        let s5 = &full.layers[5].weight.as_ref().unwrap().data;
        let cols: Vec<usize> = [1usize, 3].iter().flat_map(|&c| (c * 3)..(c * 3 + 3)).collect();
        for (ri, &r) in [0usize, 2, 5].iter().enumerate() {
            for (ci, &c) in cols.iter().enumerate() {
                assert_eq!(w5[ri * 6 + ci], s5[r * 12 + c]);
            }
        }
        // Output head: rows intact, columns follow the dense layer's rows.
        let w8 = &t.layers[8].weight.as_ref().unwrap().data;
        let s8 = &full.layers[8].weight.as_ref().unwrap().data;
        for r in 0..2 {
            for (ci, &c) in [0usize, 2, 5].iter().enumerate() {
                assert_eq!(w8[r * 3 + ci], s8[r * 6 + c]);
            }
        }
    }

    #[test]
    fn double_trim_still_rewinds_to_original_coordinates() {
        let mut full = conv_chain();
        tag_params(&mut full);
        let snapshot = RewindSnapshot { model: full.clone(), epoch: 1 };
        let once = trim(
            &full,
            &TrimPlan { kept: [(0usize, vec![0usize, 1, 3])].into_iter().collect() },
        )
        .unwrap();
        let mut twice = trim(
            &once,
            &TrimPlan { kept: [(0usize, vec![1usize, 2])].into_iter().collect() },
        )
        .unwrap();
        assert_eq!(twice.layers[0].kept, Some(vec![1, 3]));
        scramble(&mut twice);
        rewind(&mut twice, &snapshot).unwrap();
        let w0 = &twice.layers[0].weight.as_ref().unwrap().data;
        let s0 = &full.layers[0].weight.as_ref().unwrap().data;
        for (ri, &r) in [1usize, 3].iter().enumerate() {
            for k in 0..3 {
                assert_eq!(w0[ri * 3 + k], s0[r * 3 + k]);
            }
        }
    }

    #[test]
    fn masked_rewind_is_snapshot_through_the_mask() {
        let mut full = conv_chain();
        tag_params(&mut full);
        let snapshot = RewindSnapshot { model: full.clone(), epoch: 2 };
        let mut m = full.clone();
        let mut mask = ModelMask::ones(&m);
        for (j, v) in mask.layers[5].as_mut().unwrap().iter_mut().enumerate() {
            if j % 2 == 0 {
                *v = 0.0;
            }
        }
        m.mask = Some(mask);
        scramble(&mut m);
        rewind(&mut m, &snapshot).unwrap();
        let w = &m.layers[5].weight.as_ref().unwrap().data;
        let s = &full.layers[5].weight.as_ref().unwrap().data;
        for (j, (&got, &want)) in w.iter().zip(s).enumerate() {
            if j % 2 == 0 {
                assert_eq!(got, 0.0);
            } else {
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn topology_mismatches_are_rejected() {
        let full = conv_chain();
        let snapshot = RewindSnapshot { model: full.clone(), epoch: 1 };
        // Different kernel geometry.
        let mut other = build_model(
            &[
                LayerSpec::Conv1d { c_out: 4, kernel: 5, stride: 1, dilation: 1, padding: 1, prunable: true },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { n_out: 6, prunable: true },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::OutputDense { n_out: 2 },
            ],
            &[1, 8],
            OutputActivation::None,
            0,
        )
        .unwrap();
        assert!(rewind(&mut other, &snapshot).is_err());
        // Different layer count.
        let mut shallow = build_model(
            &[LayerSpec::OutputDense { n_out: 2 }],
            &[4],
            OutputActivation::None,
            0,
        )
        .unwrap();
        assert!(rewind(&mut shallow, &snapshot).is_err());
    }

    #[test]
    fn trimmed_snapshot_is_rejected() {
        let full = conv_chain();
        // A non-contiguous keep list marks the snapshot as itself trimmed.
        // (A prefix trim is structurally identical to a fresh smaller model,
        // so only non-prefix provenance is detectable.)
        let plan = TrimPlan { kept: [(0usize, vec![0usize, 2])].into_iter().collect() };
        let trimmed = trim(&full, &plan).unwrap();
        let snapshot = RewindSnapshot { model: trimmed, epoch: 1 };
        let mut m = trim(&full, &plan).unwrap();
        assert!(rewind(&mut m, &snapshot).is_err());
    }
}
