//! Unit-usefulness criteria.
//!
//! Each criterion assigns every unit of every prunable layer a non-negative
//! score; higher means more worth keeping. Three are implemented:
//!
//! * **magnitude** — the sum of absolute incoming weights of the unit
//!   (bias excluded); needs no data;
//! * **activation** — the sum of absolute post-activation outputs of the
//!   unit over a held-out set, in eval mode (conv channels additionally sum
//!   over the temporal axis); the tap point is the output of the batch-norm
//!   and relu chain directly after the layer;
//! * **batchnorm** — `|γ|` of the batch norm immediately following the
//!   layer; inapplicable (an error) when there is none.

use crate::error::{Error, Result};
use crate::graph::{ActivationSums, LayerKind, ModelGraph};
use crate::tasks::Split;
use crate::tensor::Mode;
use crate::train::{batch_ranges, gather_batch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Which ranking criterion scores units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    Magnitude,
    Activation,
    BatchNorm,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::Magnitude => "magnitude",
            Criterion::Activation => "activation",
            Criterion::BatchNorm => "batchnorm",
        }
    }

    pub fn parse(s: &str) -> Result<Criterion> {
        match s {
            "magnitude" => Ok(Criterion::Magnitude),
            "activation" => Ok(Criterion::Activation),
            "batchnorm" => Ok(Criterion::BatchNorm),
            other => Err(Error::config(format!(
                "unknown criterion `{other}` (expected magnitude, activation, or batchnorm)"
            ))),
        }
    }

    pub fn all() -> [Criterion; 3] {
        [Criterion::Magnitude, Criterion::Activation, Criterion::BatchNorm]
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-unit scores for every prunable layer, keyed by layer index. Each
/// vector is as long as the layer's current width; all entries are ≥ 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionScores {
    pub criterion: Criterion,
    pub per_layer: BTreeMap<usize, Vec<f64>>,
}

/// Scores every prunable layer of `model` under `criterion`.
///
/// `holdout` feeds the activation criterion (it must be non-empty and is
/// ignored by the others). The model is only mutated transiently (batch-norm
/// running statistics are untouched because scoring runs in eval mode).
pub fn score_units(
    model: &mut ModelGraph,
    criterion: Criterion,
    holdout: &Split,
    batch: usize,
) -> Result<CriterionScores> {
    let prunable = model.prunable_layers();
    let mut per_layer: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    match criterion {
        Criterion::Magnitude => {
            for &li in &prunable {
                per_layer.insert(li, magnitude_scores(model, li)?);
            }
        }
        Criterion::BatchNorm => {
            for &li in &prunable {
                per_layer.insert(li, batchnorm_scores(model, li)?);
            }
        }
        Criterion::Activation => {
            per_layer = activation_scores(model, holdout, batch)?;
        }
    }
    for (&li, scores) in &per_layer {
        let width = model.layers[li]
            .kind
            .unit_count()
            .ok_or_else(|| Error::contract(format!("layer {li} has no units to score")))?;
        if scores.len() != width {
            return Err(Error::contract(format!(
                "layer {li}: {} scores for {width} units",
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::contract(format!(
                "layer {li}: criterion produced a negative or non-finite score"
            )));
        }
    }
    Ok(CriterionScores {
        criterion,
        per_layer,
    })
}

/// Sum of absolute incoming weights per unit: dense rows, or conv output
/// channels flattened over input channels and kernel taps. Bias excluded.
fn magnitude_scores(model: &ModelGraph, li: usize) -> Result<Vec<f64>> {
    let layer = &model.layers[li];
    let w = layer
        .weight
        .as_ref()
        .ok_or_else(|| Error::contract(format!("layer {li} has no weights to score")))?;
    let units = w.shape[0];
    let per_unit = w.len() / units;
    let mut scores = Vec::with_capacity(units);
    for u in 0..units {
        let mut s = 0.0f64;
        for &v in &w.data[u * per_unit..(u + 1) * per_unit] {
            s += f64::from(v.abs());
        }
        scores.push(s);
    }
    Ok(scores)
}

/// `|γ|` of the batch norm directly following the layer.
fn batchnorm_scores(model: &ModelGraph, li: usize) -> Result<Vec<f64>> {
    if !model.layers[li].followed_by_batchnorm {
        return Err(Error::CriterionInapplicable {
            layer: li,
            why: "the batchnorm criterion needs a batch norm directly after the layer".into(),
        });
    }
    let bn = &model.layers[li + 1];
    debug_assert!(matches!(bn.kind, LayerKind::BatchNorm { .. }));
    let gamma = bn
        .gamma
        .as_ref()
        .ok_or_else(|| Error::contract(format!("layer {}: batch norm lacks gamma", li + 1)))?;
    Ok(gamma.data.iter().map(|&g| f64::from(g.abs())).collect())
}

/// Cumulative `|activation|` per unit over `holdout`, taken at each
/// prunable layer's tap point, in eval mode.
fn activation_scores(
    model: &mut ModelGraph,
    holdout: &Split,
    batch: usize,
) -> Result<ActivationSums> {
    if holdout.n == 0 {
        return Err(Error::contract(
            "the activation criterion needs a non-empty holdout split",
        ));
    }
    if batch == 0 {
        return Err(Error::range("criterion batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0); // eval mode draws nothing
    let mut sums = ActivationSums::new();
    let idx_all: Vec<usize> = (0..holdout.n).collect();
    let input_shape = model.input_shape.clone();
    for &(start, end) in &batch_ranges(holdout.n, batch) {
        let input = gather_batch(holdout, &idx_all[start..end], &input_shape)?;
        let mut tape = crate::tensor::Tape::new();
        model.forward_on_tape(&mut tape, &input, Mode::Eval, &mut rng, Some(&mut sums))?;
    }
    // Layers whose tap never fired (impossible for valid models) would be
    // missing here; make absence loud rather than silently unranked.
    for li in model.prunable_layers() {
        if !sums.contains_key(&li) {
            return Err(Error::contract(format!(
                "activation criterion produced no scores for layer {li}"
            )));
        }
    }
    Ok(sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_model, LayerSpec, OutputActivation};
    use crate::tasks::Target;

    fn split_of(rows: &[Vec<f32>]) -> Split {
        let mut s = Split::new(rows[0].len());
        for r in rows {
            s.push(r, Target::Class(0));
        }
        s
    }

    /// dense(2→2, prunable) → relu → output(2→2), with hand-set weights.
    fn toy_dense() -> ModelGraph {
        let mut m = build_model(
            &[
                LayerSpec::Dense { n_out: 2, prunable: true },
                LayerSpec::Relu,
                LayerSpec::OutputDense { n_out: 2 },
            ],
            &[2],
            OutputActivation::None,
            0,
        )
        .unwrap();
        let w = &mut m.layers[0].weight.as_mut().unwrap().data;
        w.copy_from_slice(&[1.0, -2.0, 0.5, 0.5]);
        m.layers[0].bias.as_mut().unwrap().data.copy_from_slice(&[0.0, 0.0]);
        m
    }

    #[test]
    fn magnitude_dense_fixture() {
        let mut m = toy_dense();
        let scores = score_units(&mut m, Criterion::Magnitude, &split_of(&[vec![0.0, 0.0]]), 4)
            .unwrap();
        assert_eq!(scores.per_layer[&0], vec![3.0, 1.0]);
    }

    #[test]
    fn magnitude_conv_is_flat_sum() {
        let mut m = build_model(
            &[
                LayerSpec::Conv1d {
                    c_out: 2,
                    kernel: 3,
                    stride: 1,
                    dilation: 1,
                    padding: 0,
                    prunable: true,
                },
                LayerSpec::Flatten,
                LayerSpec::OutputDense { n_out: 2 },
            ],
            &[2, 5],
            OutputActivation::None,
            1,
        )
        .unwrap();
        let w = m.layers[0].weight.as_ref().unwrap().data.clone();
        let scores =
            score_units(&mut m, Criterion::Magnitude, &split_of(&[vec![0.0; 10]]), 4).unwrap();
        // Each channel owns 2·3 = 6 consecutive weights.
        for u in 0..2 {
            let want: f64 = w[u * 6..(u + 1) * 6].iter().map(|v| f64::from(v.abs())).sum();
            assert!((scores.per_layer[&0][u] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn all_zero_unit_scores_zero_and_ranks_last() {
        let mut m = toy_dense();
        m.layers[0].weight.as_mut().unwrap().data[2..4].fill(0.0);
        let scores = score_units(&mut m, Criterion::Magnitude, &split_of(&[vec![0.0, 0.0]]), 4)
            .unwrap();
        assert_eq!(scores.per_layer[&0], vec![3.0, 0.0]);
    }

    #[test]
    fn activation_dead_unit_scores_zero() {
        let mut m = toy_dense();
        // Unit 1: zero weights, strongly negative bias → relu output 0 always.
        {
            let w = &mut m.layers[0].weight.as_mut().unwrap().data;
            w[2] = 0.0;
            w[3] = 0.0;
        }
        m.layers[0].bias.as_mut().unwrap().data[1] = -5.0;
        let holdout = split_of(&[vec![1.0, 2.0], vec![-0.5, 0.25], vec![3.0, -1.0]]);
        let scores = score_units(&mut m, Criterion::Activation, &holdout, 2).unwrap();
        assert_eq!(scores.per_layer[&0][1], 0.0);
        assert!(scores.per_layer[&0][0] > 0.0);
    }

    #[test]
    fn activation_doubles_with_duplicated_holdout() {
        let mut m = toy_dense();
        let rows = vec![vec![1.0, 2.0], vec![-0.5, 0.25], vec![0.3, 0.9]];
        let single = split_of(&rows);
        let mut doubled_rows = rows.clone();
        doubled_rows.extend(rows);
        let doubled = split_of(&doubled_rows);
        let a = score_units(&mut m, Criterion::Activation, &single, 2).unwrap();
        let b = score_units(&mut m, Criterion::Activation, &doubled, 4).unwrap();
        for u in 0..2 {
            let (x, y) = (a.per_layer[&0][u], b.per_layer[&0][u]);
            assert!((y - 2.0 * x).abs() <= 1e-9 * x.abs().max(1.0), "{y} != 2·{x}");
        }
    }

    #[test]
    fn activation_is_batch_size_invariant() {
        let mut m = toy_dense();
        let rows: Vec<Vec<f32>> = (0..7)
            .map(|i| vec![0.1 * i as f32 - 0.3, 0.4 - 0.05 * i as f32])
            .collect();
        let holdout = split_of(&rows);
        let a = score_units(&mut m, Criterion::Activation, &holdout, 1).unwrap();
        let b = score_units(&mut m, Criterion::Activation, &holdout, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn activation_rejects_empty_holdout() {
        let mut m = toy_dense();
        let empty = Split::new(2);
        assert!(matches!(
            score_units(&mut m, Criterion::Activation, &empty, 4),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn batchnorm_scores_are_absolute_gamma() {
        let mut m = build_model(
            &[
                LayerSpec::Dense { n_out: 3, prunable: true },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::OutputDense { n_out: 2 },
            ],
            &[2],
            OutputActivation::None,
            0,
        )
        .unwrap();
        m.layers[1]
            .gamma
            .as_mut()
            .unwrap()
            .data
            .copy_from_slice(&[0.1, -2.0, 0.0]);
        let scores =
            score_units(&mut m, Criterion::BatchNorm, &split_of(&[vec![0.0, 0.0]]), 4).unwrap();
        assert_eq!(scores.per_layer[&0], vec![f64::from(0.1f32), 2.0, 0.0]);
    }

    #[test]
    fn batchnorm_without_following_norm_is_inapplicable() {
        let mut m = toy_dense(); // dense → relu, no batch norm
        match score_units(&mut m, Criterion::BatchNorm, &split_of(&[vec![0.0, 0.0]]), 4) {
            Err(Error::CriterionInapplicable { layer, .. }) => assert_eq!(layer, 0),
            other => panic!("expected inapplicable, got {other:?}"),
        }
    }

    #[test]
    fn criterion_names_roundtrip() {
        for c in Criterion::all() {
            assert_eq!(Criterion::parse(c.name()).unwrap(), c);
        }
        assert!(Criterion::parse("entropy").is_err());
    }
}
