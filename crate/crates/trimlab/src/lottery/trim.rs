//! Physically removing units from a model.
//!
//! Trimming deletes whole units — dense rows or conv output channels — and
//! propagates the deletion downstream: the following batch norm loses the
//! same channels, flatten layers remap surviving channel×position pairs
//! into the next dense layer's columns, and every consumer drops the input
//! columns that used to read the removed units. The result is a genuinely
//! smaller model (fewer parameters, FLOPs, and bytes), not a masked one.
//!
//! Every unit-bearing layer keeps a provenance list of original indices
//! (`kept`), updated on each trim, so any trimmed model can still be mapped
//! back onto full-size weight snapshots for rewinding.

use super::rank::TrimPlan;
use crate::error::{Error, Result};
use crate::graph::{LayerKind, ModelGraph};
use crate::tensor::Tensor;

/// Returns a smaller copy of `model` that keeps exactly the units listed in
/// `plan` (layers absent from the plan keep everything).
pub fn trim(model: &ModelGraph, plan: &TrimPlan) -> Result<ModelGraph> {
    validate_plan(model, plan)?;
    let trace = model.shape_trace()?;
    let mut out = model.clone();
    // Indices (into each layer's current input width) that survive; None
    // means the input dimension is untouched.
    let mut input_keep: Option<Vec<usize>> = None;
    for i in 0..model.layers.len() {
        let kind = model.layers[i].kind.clone();
        match kind {
            LayerKind::Dense { n_out, n_in } | LayerKind::OutputDense { n_out, n_in } => {
                let rows: Option<Vec<usize>> = plan.kept.get(&i).cloned();
                slice_linear(&mut out, i, n_out, n_in, rows.as_deref(), input_keep.as_deref())?;
                let (new_out, new_in) = (
                    rows.as_ref().map_or(n_out, Vec::len),
                    input_keep.as_ref().map_or(n_in, Vec::len),
                );
                out.layers[i].kind = match kind {
                    LayerKind::Dense { .. } => LayerKind::Dense {
                        n_out: new_out,
                        n_in: new_in,
                    },
                    _ => LayerKind::OutputDense {
                        n_out: new_out,
                        n_in: new_in,
                    },
                };
                input_keep = rows;
            }
            LayerKind::Conv1d {
                c_out,
                c_in,
                kernel,
                stride,
                dilation,
                padding,
            } => {
                let rows: Option<Vec<usize>> = plan.kept.get(&i).cloned();
                slice_conv(
                    &mut out,
                    i,
                    c_out,
                    c_in,
                    kernel,
                    rows.as_deref(),
                    input_keep.as_deref(),
                )?;
                out.layers[i].kind = LayerKind::Conv1d {
                    c_out: rows.as_ref().map_or(c_out, Vec::len),
                    c_in: input_keep.as_ref().map_or(c_in, Vec::len),
                    kernel,
                    stride,
                    dilation,
                    padding,
                };
                input_keep = rows;
            }
            LayerKind::BatchNorm { .. } => {
                if let Some(keep) = &input_keep {
                    let l = &mut out.layers[i];
                    let slice_t = |t: &Tensor| {
                        Tensor::param(&[keep.len()], keep.iter().map(|&u| t.data[u]).collect())
                    };
                    l.gamma = Some(slice_t(l.gamma.as_ref().unwrap())?);
                    l.beta = Some(slice_t(l.beta.as_ref().unwrap())?);
                    let rm = l.running_mean.as_ref().unwrap();
                    l.running_mean = Some(keep.iter().map(|&u| rm[u]).collect());
                    let rv = l.running_var.as_ref().unwrap();
                    l.running_var = Some(keep.iter().map(|&u| rv[u]).collect());
                    let old_kept = l.kept.as_ref().unwrap();
                    l.kept = Some(keep.iter().map(|&u| old_kept[u]).collect());
                    l.kind = LayerKind::BatchNorm {
                        channels: keep.len(),
                    };
                }
            }
            LayerKind::Relu | LayerKind::Dropout { .. } | LayerKind::MaxPool { .. } => {}
            LayerKind::Flatten => {
                if let Some(keep) = input_keep.take() {
                    // [C, L] flattens channel-major: channel c owns columns
                    // c·L ..= c·L+L−1 of the flat vector.
                    let len = trace[i][1];
                    input_keep = Some(
                        keep.iter()
                            .flat_map(|&c| (c * len)..(c * len + len))
                            .collect(),
                    );
                }
            }
        }
    }
    out.validate()?;
    Ok(out)
}

fn validate_plan(model: &ModelGraph, plan: &TrimPlan) -> Result<()> {
    for (&li, kept) in &plan.kept {
        let layer = model.layers.get(li).ok_or_else(|| {
            Error::shape(format!("plan names layer {li}, model has {}", model.layers.len()))
        })?;
        let width = match layer.kind.unit_count() {
            Some(w) if layer.prunable => w,
            _ => {
                return Err(Error::shape(format!(
                    "plan names layer {li} ({}), which is not prunable",
                    layer.kind.name()
                )))
            }
        };
        if kept.is_empty() {
            return Err(Error::shape(format!("plan empties layer {li}")));
        }
        if !kept.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::shape(format!(
                "plan for layer {li} is not strictly increasing"
            )));
        }
        if *kept.last().unwrap() >= width {
            return Err(Error::shape(format!(
                "plan keeps unit {} of layer {li}, which has width {width}",
                kept.last().unwrap()
            )));
        }
    }
    Ok(())
}

/// Slices a dense layer's weight `[n_out, n_in]`, bias, provenance, and any
/// mask rows/columns. `None` keeps a dimension whole.
fn slice_linear(
    out: &mut ModelGraph,
    i: usize,
    n_out: usize,
    n_in: usize,
    rows: Option<&[usize]>,
    cols: Option<&[usize]>,
) -> Result<()> {
    if rows.is_none() && cols.is_none() {
        return Ok(());
    }
    let full_rows: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            full_rows = (0..n_out).collect();
            &full_rows
        }
    };
    let full_cols: Vec<usize>;
    let cols = match cols {
        Some(c) => c,
        None => {
            full_cols = (0..n_in).collect();
            &full_cols
        }
    };
    let pick = |data: &[f32]| -> Vec<f32> {
        let mut v = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            for &c in cols {
                v.push(data[r * n_in + c]);
            }
        }
        v
    };
    let l = &mut out.layers[i];
    let w = l.weight.as_ref().unwrap();
    l.weight = Some(Tensor::param(&[rows.len(), cols.len()], pick(&w.data))?);
    let b = l.bias.as_ref().unwrap();
    l.bias = Some(Tensor::param(
        &[rows.len()],
        rows.iter().map(|&r| b.data[r]).collect(),
    )?);
    let old_kept = l.kept.as_ref().unwrap();
    l.kept = Some(rows.iter().map(|&r| old_kept[r]).collect());
    if let Some(mask) = &mut out.mask {
        if let Some(m) = &mut mask.layers[i] {
            *m = pick(m);
        }
    }
    Ok(())
}

/// Slices a conv layer's weight `[c_out, c_in, k]`, bias, provenance, and
/// mask the same way.
fn slice_conv(
    out: &mut ModelGraph,
    i: usize,
    c_out: usize,
    c_in: usize,
    kernel: usize,
    rows: Option<&[usize]>,
    cols: Option<&[usize]>,
) -> Result<()> {
    if rows.is_none() && cols.is_none() {
        return Ok(());
    }
    let full_rows: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            full_rows = (0..c_out).collect();
            &full_rows
        }
    };
    let full_cols: Vec<usize>;
    let cols = match cols {
        Some(c) => c,
        None => {
            full_cols = (0..c_in).collect();
            &full_cols
        }
    };
    let pick = |data: &[f32]| -> Vec<f32> {
        let mut v = Vec::with_capacity(rows.len() * cols.len() * kernel);
        for &r in rows {
            for &c in cols {
                let base = (r * c_in + c) * kernel;
                v.extend_from_slice(&data[base..base + kernel]);
            }
        }
        v
    };
    let l = &mut out.layers[i];
    let w = l.weight.as_ref().unwrap();
    l.weight = Some(Tensor::param(
        &[rows.len(), cols.len(), kernel],
        pick(&w.data),
    )?);
    let b = l.bias.as_ref().unwrap();
    l.bias = Some(Tensor::param(
        &[rows.len()],
        rows.iter().map(|&r| b.data[r]).collect(),
    )?);
    let old_kept = l.kept.as_ref().unwrap();
    l.kept = Some(rows.iter().map(|&r| old_kept[r]).collect());
    if let Some(mask) = &mut out.mask {
        if let Some(m) = &mut mask.layers[i] {
            *m = pick(m);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_model, LayerSpec, ModelMask, OutputActivation};

    fn plan_of(entries: &[(usize, Vec<usize>)]) -> TrimPlan {
        TrimPlan {
            kept: entries.iter().cloned().collect(),
        }
    }

    /// dense(3, prunable) → relu → output(4), weights set to r·10 + c.
    fn tagged_dense() -> ModelGraph {
        let mut m = build_model(
            &[
                LayerSpec::Dense { n_out: 3, prunable: true },
                LayerSpec::Relu,
                LayerSpec::OutputDense { n_out: 4 },
            ],
            &[2],
            OutputActivation::None,
            0,
        )
        .unwrap();
        for li in [0usize, 2] {
            let w = m.layers[li].weight.as_mut().unwrap();
            let n_in = w.shape[1];
            for r in 0..w.shape[0] {
                for c in 0..n_in {
                    w.data[r * n_in + c] = (r * 10 + c) as f32;
                }
            }
            let b = m.layers[li].bias.as_mut().unwrap();
            for (r, v) in b.data.iter_mut().enumerate() {
                *v = 100.0 + r as f32;
            }
        }
        m
    }

    #[test]
    fn downstream_columns_follow_kept_rows() {
        let m = tagged_dense();
        let t = trim(&m, &plan_of(&[(0, vec![0, 2])])).unwrap();
        // Layer 0: rows {0, 2} of a [3, 2] weight survive.
        let w0 = t.layers[0].weight.as_ref().unwrap();
        assert_eq!(w0.shape, vec![2, 2]);
        assert_eq!(w0.data, vec![0.0, 1.0, 20.0, 21.0]);
        assert_eq!(t.layers[0].bias.as_ref().unwrap().data, vec![100.0, 102.0]);
        assert_eq!(t.layers[0].kept, Some(vec![0, 2]));
        // Layer 2: the 4×3 head keeps columns {0, 2}.
        let w2 = t.layers[2].weight.as_ref().unwrap();
        assert_eq!(w2.shape, vec![4, 2]);
        assert_eq!(
            w2.data,
            vec![0.0, 2.0, 10.0, 12.0, 20.0, 22.0, 30.0, 32.0]
        );
        // The head's own rows are untouched.
        assert_eq!(
            t.layers[2].bias.as_ref().unwrap().data,
            vec![100.0, 101.0, 102.0, 103.0]
        );
        t.validate().unwrap();
    }

    #[test]
    fn identity_plan_is_a_bitwise_noop() {
        let m = tagged_dense();
        let t = trim(&m, &plan_of(&[(0, vec![0, 1, 2])])).unwrap();
        assert_eq!(t, m);
        let t = trim(&m, &plan_of(&[])).unwrap();
        assert_eq!(t, m);
    }

    #[test]
    fn provenance_composes_across_trims() {
        let m = build_model(
            &[
                LayerSpec::Dense { n_out: 6, prunable: true },
                LayerSpec::Relu,
                LayerSpec::OutputDense { n_out: 2 },
            ],
            &[3],
            OutputActivation::None,
            5,
        )
        .unwrap();
        let once = trim(&m, &plan_of(&[(0, vec![0, 2, 4])])).unwrap();
        assert_eq!(once.layers[0].kept, Some(vec![0, 2, 4]));
        // Current indices {1, 2} of the shrunken layer are originals {2, 4}.
        let twice = trim(&once, &plan_of(&[(0, vec![1, 2])])).unwrap();
        assert_eq!(twice.layers[0].kept, Some(vec![2, 4]));
        twice.validate().unwrap();
    }

    #[test]
    fn batchnorm_and_running_stats_follow_their_units() {
        let mut m = build_model(
            &[
                LayerSpec::Dense { n_out: 4, prunable: true },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::OutputDense { n_out: 2 },
            ],
            &[3],
            OutputActivation::None,
            2,
        )
        .unwrap();
        m.layers[1].gamma.as_mut().unwrap().data.copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        m.layers[1].beta.as_mut().unwrap().data.copy_from_slice(&[-1.0, -2.0, -3.0, -4.0]);
        m.layers[1].running_mean = Some(vec![10.0, 20.0, 30.0, 40.0]);
        m.layers[1].running_var = Some(vec![1.0, 4.0, 9.0, 16.0]);
        let t = trim(&m, &plan_of(&[(0, vec![1, 3])])).unwrap();
        assert_eq!(t.layers[1].gamma.as_ref().unwrap().data, vec![2.0, 4.0]);
        assert_eq!(t.layers[1].beta.as_ref().unwrap().data, vec![-2.0, -4.0]);
        assert_eq!(t.layers[1].running_mean, Some(vec![20.0, 40.0]));
        assert_eq!(t.layers[1].running_var, Some(vec![4.0, 16.0]));
        assert_eq!(t.layers[1].kept, Some(vec![1, 3]));
    }

    #[test]
    fn conv_consumer_drops_input_channels() {
        let m = build_model(
            &[
                LayerSpec::Conv1d { c_out: 4, kernel: 3, stride: 1, dilation: 1, padding: 0, prunable: true },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Conv1d { c_out: 3, kernel: 2, stride: 1, dilation: 1, padding: 0, prunable: true },
                LayerSpec::Flatten,
                LayerSpec::OutputDense { n_out: 2 },
            ],
            &[1, 8],
            OutputActivation::None,
            9,
        )
        .unwrap();
        let orig = m.layers[3].weight.as_ref().unwrap().clone();
        let t = trim(&m, &plan_of(&[(0, vec![1, 3])])).unwrap();
        let w = t.layers[3].weight.as_ref().unwrap();
        assert_eq!(w.shape, vec![3, 2, 2]);
        // Channel column c of the new weight is original channel {1,3}[c].
        for r in 0..3 {
            for (cc, &oc) in [1usize, 3].iter().enumerate() {
                for k in 0..2 {
                    assert_eq!(
                        w.data[(r * 2 + cc) * 2 + k],
                        orig.data[(r * 4 + oc) * 2 + k]
                    );
                }
            }
        }
        t.validate().unwrap();
    }

    #[test]
    fn flatten_remaps_channel_blocks_into_dense_columns() {
        let m = build_model(
            &[
                LayerSpec::Conv1d { c_out: 3, kernel: 3, stride: 1, dilation: 1, padding: 0, prunable: true },
                LayerSpec::Relu,
                LayerSpec::Flatten, // [3, 4] -> 12 features, channel-major
                LayerSpec::OutputDense { n_out: 2 },
            ],
            &[1, 6],
            OutputActivation::None,
            3,
        )
        .unwrap();
        let orig = m.layers[3].weight.as_ref().unwrap().clone();
        let t = trim(&m, &plan_of(&[(0, vec![0, 2])])).unwrap();
        let w = t.layers[3].weight.as_ref().unwrap();
        assert_eq!(w.shape, vec![2, 8]);
        // Columns 0..4 come from channel 0, columns 4..8 from channel 2.
        for r in 0..2 {
            for (b, &oc) in [0usize, 2].iter().enumerate() {
                for p in 0..4 {
                    assert_eq!(w.data[r * 8 + b * 4 + p], orig.data[r * 12 + oc * 4 + p]);
                }
            }
        }
        t.validate().unwrap();
    }

    #[test]
    fn mask_slices_with_its_weights() {
        let mut m = tagged_dense();
        let mut mask = ModelMask::ones(&m);
        // Mark layer 0's row 2 and the head's column 1 distinctly.
        mask.layers[0].as_mut().unwrap()[4] = 0.0; // (r2, c0) of [3, 2]
        mask.layers[2].as_mut().unwrap()[1] = 0.0; // (r0, c1) of [4, 3]
        m.mask = Some(mask);
        let t = trim(&m, &plan_of(&[(0, vec![0, 2])])).unwrap();
        let tm = t.mask.as_ref().unwrap();
        // Row 2 became row 1 of a [2, 2] weight.
        assert_eq!(tm.layers[0].as_ref().unwrap()[2], 0.0);
        // Head column 1 was dropped, so its zero vanished with it.
        assert!(tm.layers[2].as_ref().unwrap().iter().all(|&v| v == 1.0));
        t.validate().unwrap();
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let m = tagged_dense();
        // Not prunable (the output head).
        assert!(trim(&m, &plan_of(&[(2, vec![0])])).is_err());
        // Unknown layer.
        assert!(trim(&m, &plan_of(&[(9, vec![0])])).is_err());
        // Empty keep list.
        assert!(trim(&m, &plan_of(&[(0, vec![])])).is_err());
        // Out of range.
        assert!(trim(&m, &plan_of(&[(0, vec![0, 3])])).is_err());
        // Not strictly increasing.
        assert!(trim(&m, &plan_of(&[(0, vec![2, 0])])).is_err());
    }
}
