//! Sequential model graphs: layer specs, parameter storage, forward passes,
//! and cost accounting (parameters, FLOPs, memory, disk).
//!
//! A [`ModelGraph`] is a straight pipeline of layers over `[batch, features]`
//! or `[batch, channels, length]` activations. Layers that own units —
//! dense rows or convolution output channels — can be marked *prunable*;
//! the pruning engine physically removes units from them and every layer
//! records which **original** unit indices are still alive (`kept`), so a
//! shrunken model can always be mapped back onto snapshots of the full one.

use crate::error::{Error, Result};
use crate::tensor::{tape::Value, Mode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Layer description used to build a model. Sizes of the *input* side are
/// inferred from the preceding layer, so specs only carry output sizes.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Fully connected layer with `n_out` units.
    Dense { n_out: usize, prunable: bool },
    /// Final fully connected layer; never prunable (its arity is the task's).
    OutputDense { n_out: usize },
    /// 1-D convolution with `c_out` output channels.
    Conv1d {
        c_out: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
        prunable: bool,
    },
    /// Batch normalization over the current channel/feature dimension.
    BatchNorm,
    Relu,
    /// Non-overlapping max pooling (stride = window).
    MaxPool { window: usize },
    Dropout { p: f32 },
    /// Collapses `[C, L]` to `[C·L]` features, channel-major.
    Flatten,
}

/// A layer's concrete kind with all dimensions resolved.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Dense { n_out: usize, n_in: usize },
    OutputDense { n_out: usize, n_in: usize },
    Conv1d {
        c_out: usize,
        c_in: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    },
    BatchNorm { channels: usize },
    Relu,
    MaxPool { window: usize },
    Dropout { p: f32 },
    Flatten,
}

impl LayerKind {
    /// Short lowercase name used in errors and logs.
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::OutputDense { .. } => "output-dense",
            LayerKind::Conv1d { .. } => "conv1d",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Number of removable units this layer owns (dense rows / conv output
    /// channels). `None` for layers without their own units.
    pub fn unit_count(&self) -> Option<usize> {
        match self {
            LayerKind::Dense { n_out, .. } => Some(*n_out),
            LayerKind::Conv1d { c_out, .. } => Some(*c_out),
            _ => None,
        }
    }
}

/// Activation applied to the final logits by [`ModelGraph::forward`].
/// Training losses work on the raw logits (cross-entropy fuses its own
/// log-softmax; binary cross-entropy gets probabilities via sigmoid).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    None,
    Softmax,
    Sigmoid,
}

/// One layer: resolved kind, parameters, and unit provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    /// Whether the pruning engine may remove units from this layer.
    pub prunable: bool,
    /// True when the next layer is a batch norm (several criteria need it).
    pub followed_by_batchnorm: bool,
    /// Dense/conv weight, `[n_out, n_in]` or `[c_out, c_in, k]`.
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    /// Batch-norm scale/shift.
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
    pub running_mean: Option<Vec<f32>>,
    pub running_var: Option<Vec<f32>>,
    /// For layers with a unit/channel dimension: the **original** index of
    /// each surviving unit, strictly increasing. Starts as `0..width`.
    pub kept: Option<Vec<u32>>,
}

impl Layer {
    fn bare(kind: LayerKind) -> Layer {
        Layer {
            kind,
            prunable: false,
            followed_by_batchnorm: false,
            weight: None,
            bias: None,
            gamma: None,
            beta: None,
            running_mean: None,
            running_var: None,
            kept: None,
        }
    }
}

/// Binary mask over dense/conv weights, aligned with the layer list.
/// `1.0` keeps a weight, `0.0` freezes it at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMask {
    pub layers: Vec<Option<Vec<f32>>>,
}

impl ModelMask {
    /// All-ones mask covering every weighted layer of the model.
    pub fn ones(model: &ModelGraph) -> ModelMask {
        ModelMask {
            layers: model
                .layers
                .iter()
                .map(|l| l.weight.as_ref().map(|w| vec![1.0f32; w.len()]))
                .collect(),
        }
    }

    /// Number of masked-out (zero) entries.
    pub fn zero_count(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|m| m.iter().filter(|&&v| v == 0.0).count())
            .sum()
    }

    /// Total number of mask entries (i.e. maskable weights).
    pub fn total(&self) -> usize {
        self.layers.iter().flatten().map(Vec::len).sum()
    }
}

/// Which parameter of a layer a tape leaf corresponds to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Weight,
    Bias,
    Gamma,
    Beta,
}

/// Result of a tape forward pass: the logits plus every parameter leaf,
/// in a stable (layer, slot) order.
pub struct ForwardPass {
    pub logits: Value,
    pub params: Vec<(usize, Slot, Value)>,
}

/// Per-layer activation accumulator for the activation criterion: maps a
/// prunable layer index to the running sum of `|activation|` per unit.
/// Accumulated in f64 so scores are insensitive to batch grouping.
pub type ActivationSums = BTreeMap<usize, Vec<f64>>;

/// A sequential model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub layers: Vec<Layer>,
    /// Input shape without the batch dimension: `[features]` or `[channels, length]`.
    pub input_shape: Vec<usize>,
    pub output_activation: OutputActivation,
    /// Seed the parameters were initialized from.
    pub seed: u64,
    /// Present on masked models; weights where the mask is zero stay zero.
    pub mask: Option<ModelMask>,
}

/// Builds a model from layer specs, validating the chain and initializing
/// parameters from `seed` (uniform in ±1/√fan_in, drawn in layer order).
pub fn build_model(
    specs: &[LayerSpec],
    input_shape: &[usize],
    output_activation: OutputActivation,
    seed: u64,
) -> Result<ModelGraph> {
    if specs.is_empty() {
        return Err(Error::shape("a model needs at least one layer"));
    }
    if input_shape.is_empty() || input_shape.len() > 2 || input_shape.contains(&0) {
        return Err(Error::shape(format!(
            "input shape must be [features] or [channels, length] with positive dims, got {input_shape:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(specs.len());
    let mut shape = input_shape.to_vec();
    for (i, spec) in specs.iter().enumerate() {
        let is_last = i + 1 == specs.len();
        let layer = match *spec {
            LayerSpec::Dense { n_out, prunable } => {
                if n_out == 0 {
                    return Err(Error::shape(format!(
                        "layer {i}: dense width must be positive"
                    )));
                }
                let n_in = dense_input(&shape, i)?;
                let mut l = Layer::bare(LayerKind::Dense { n_out, n_in });
                l.prunable = prunable;
                init_linear(&mut l, n_out, n_in, &mut rng)?;
                l.kept = Some((0..n_out as u32).collect());
                shape = vec![n_out];
                l
            }
            LayerSpec::OutputDense { n_out } => {
                if n_out == 0 {
                    return Err(Error::shape(format!(
                        "layer {i}: dense width must be positive"
                    )));
                }
                if !is_last {
                    return Err(Error::shape(format!(
                        "layer {i}: the output layer must come last"
                    )));
                }
                let n_in = dense_input(&shape, i)?;
                let mut l = Layer::bare(LayerKind::OutputDense { n_out, n_in });
                init_linear(&mut l, n_out, n_in, &mut rng)?;
                l.kept = Some((0..n_out as u32).collect());
                shape = vec![n_out];
                l
            }
            LayerSpec::Conv1d {
                c_out,
                kernel,
                stride,
                dilation,
                padding,
                prunable,
            } => {
                if shape.len() != 2 {
                    return Err(Error::shape(format!(
                        "layer {i}: conv1d needs [channels, length] input, got {shape:?}"
                    )));
                }
                if c_out == 0 {
                    return Err(Error::shape(format!(
                        "layer {i}: conv1d channel count must be positive"
                    )));
                }
                let (c_in, len) = (shape[0], shape[1]);
                let l_out = Tape::conv1d_out_len(len, kernel, stride, dilation, padding)
                    .map_err(|e| Error::shape(format!("layer {i}: {e}")))?;
                let mut l = Layer::bare(LayerKind::Conv1d {
                    c_out,
                    c_in,
                    kernel,
                    stride,
                    dilation,
                    padding,
                });
                l.prunable = prunable;
                init_conv(&mut l, c_out, c_in, kernel, &mut rng)?;
                l.kept = Some((0..c_out as u32).collect());
                shape = vec![c_out, l_out];
                l
            }
            LayerSpec::BatchNorm => {
                let channels = shape[0];
                let mut l = Layer::bare(LayerKind::BatchNorm { channels });
                l.gamma = Some(Tensor::param(&[channels], vec![1.0; channels])?);
                l.beta = Some(Tensor::param(&[channels], vec![0.0; channels])?);
                l.running_mean = Some(vec![0.0; channels]);
                l.running_var = Some(vec![1.0; channels]);
                l.kept = Some((0..channels as u32).collect());
                l
            }
            LayerSpec::Relu => Layer::bare(LayerKind::Relu),
            LayerSpec::MaxPool { window } => {
                if shape.len() != 2 {
                    return Err(Error::shape(format!(
                        "layer {i}: maxpool needs [channels, length] input, got {shape:?}"
                    )));
                }
                if window == 0 || window > shape[1] {
                    return Err(Error::shape(format!(
                        "layer {i}: maxpool window {window} invalid for length {}",
                        shape[1]
                    )));
                }
                shape = vec![shape[0], shape[1] / window];
                Layer::bare(LayerKind::MaxPool { window })
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::range(format!(
                        "layer {i}: dropout probability must lie in [0, 1), got {p}"
                    )));
                }
                Layer::bare(LayerKind::Dropout { p })
            }
            LayerSpec::Flatten => {
                if shape.len() != 2 {
                    return Err(Error::shape(format!(
                        "layer {i}: flatten needs [channels, length] input, got {shape:?}"
                    )));
                }
                shape = vec![shape[0] * shape[1]];
                Layer::bare(LayerKind::Flatten)
            }
        };
        layers.push(layer);
    }
    if !matches!(layers.last().unwrap().kind, LayerKind::OutputDense { .. }) {
        return Err(Error::shape("the last layer must be the output layer"));
    }
    for i in 0..layers.len() - 1 {
        if matches!(layers[i + 1].kind, LayerKind::BatchNorm { .. }) {
            layers[i].followed_by_batchnorm = true;
        }
    }
    Ok(ModelGraph {
        layers,
        input_shape: input_shape.to_vec(),
        output_activation,
        seed,
        mask: None,
    })
}

fn dense_input(shape: &[usize], i: usize) -> Result<usize> {
    if shape.len() != 1 {
        return Err(Error::shape(format!(
            "layer {i}: dense needs flat [features] input, got {shape:?} (insert a flatten)"
        )));
    }
    Ok(shape[0])
}

fn init_linear(l: &mut Layer, n_out: usize, n_in: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let bound = 1.0 / (n_in as f32).sqrt();
    let w: Vec<f32> = (0..n_out * n_in).map(|_| rng.gen_range(-bound..bound)).collect();
    let b: Vec<f32> = (0..n_out).map(|_| rng.gen_range(-bound..bound)).collect();
    l.weight = Some(Tensor::param(&[n_out, n_in], w)?);
    l.bias = Some(Tensor::param(&[n_out], b)?);
    Ok(())
}

fn init_conv(
    l: &mut Layer,
    c_out: usize,
    c_in: usize,
    kernel: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let fan_in = c_in * kernel;
    let bound = 1.0 / (fan_in as f32).sqrt();
    let w: Vec<f32> = (0..c_out * c_in * kernel)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    let b: Vec<f32> = (0..c_out).map(|_| rng.gen_range(-bound..bound)).collect();
    l.weight = Some(Tensor::param(&[c_out, c_in, kernel], w)?);
    l.bias = Some(Tensor::param(&[c_out], b)?);
    Ok(())
}

impl ModelGraph {
    /// Output shape of every layer (batch dimension omitted), starting with
    /// the model input, so `trace[i+1]` is layer `i`'s output shape.
    pub fn shape_trace(&self) -> Result<Vec<Vec<usize>>> {
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        let mut shape = self.input_shape.clone();
        trace.push(shape.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match &layer.kind {
                LayerKind::Dense { n_out, n_in } | LayerKind::OutputDense { n_out, n_in } => {
                    if shape != [*n_in] {
                        return Err(Error::shape(format!(
                            "layer {i}: dense expects [{n_in}], got {shape:?}"
                        )));
                    }
                    vec![*n_out]
                }
                LayerKind::Conv1d {
                    c_out,
                    c_in,
                    kernel,
                    stride,
                    dilation,
                    padding,
                } => {
                    if shape.len() != 2 || shape[0] != *c_in {
                        return Err(Error::shape(format!(
                            "layer {i}: conv1d expects [{c_in}, L], got {shape:?}"
                        )));
                    }
                    let l_out =
                        Tape::conv1d_out_len(shape[1], *kernel, *stride, *dilation, *padding)?;
                    vec![*c_out, l_out]
                }
                LayerKind::BatchNorm { channels } => {
                    if shape[0] != *channels {
                        return Err(Error::shape(format!(
                            "layer {i}: batchnorm expects {channels} channels, got {shape:?}"
                        )));
                    }
                    shape
                }
                LayerKind::Relu | LayerKind::Dropout { .. } => shape,
                LayerKind::MaxPool { window } => {
                    if shape.len() != 2 || *window == 0 || *window > shape[1] {
                        return Err(Error::shape(format!(
                            "layer {i}: maxpool window {window} invalid for {shape:?}"
                        )));
                    }
                    vec![shape[0], shape[1] / window]
                }
                LayerKind::Flatten => {
                    if shape.len() != 2 {
                        return Err(Error::shape(format!(
                            "layer {i}: flatten expects [C, L], got {shape:?}"
                        )));
                    }
                    vec![shape[0] * shape[1]]
                }
            };
            trace.push(shape.clone());
        }
        Ok(trace)
    }

    /// Indices of layers the pruning engine may shrink.
    pub fn prunable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.prunable && l.kind.unit_count().is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// For each prunable layer, the tape position whose activations feed the
    /// activation criterion: the output of the chain of batch-norm/relu
    /// layers immediately following it (pooling, dropout, or anything else
    /// ends the chain).
    pub fn activation_tap(&self, layer: usize) -> usize {
        let mut tap = layer;
        for (j, l) in self.layers.iter().enumerate().skip(layer + 1) {
            match l.kind {
                LayerKind::BatchNorm { .. } | LayerKind::Relu => tap = j,
                _ => break,
            }
        }
        tap
    }

    /// Runs the model on a tape, recording every parameter as a leaf.
    ///
    /// `input` must be `[batch] + input_shape`. When `taps` is given, the
    /// per-unit absolute activations at each prunable layer's tap point are
    /// accumulated into it (summed over batch and time). Every layer output
    /// is checked for non-finite values.
    pub fn forward_on_tape(
        &mut self,
        tape: &mut Tape,
        input: &Tensor,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        mut taps: Option<&mut ActivationSums>,
    ) -> Result<ForwardPass> {
        let want: Vec<usize> = self.input_shape.clone();
        if input.shape.len() != want.len() + 1 || input.shape[1..] != want[..] {
            return Err(Error::shape(format!(
                "model expects input [B, {:?}], got {:?}",
                want, input.shape
            )));
        }
        // Map prunable layer -> tap layer, inverted for quick lookup.
        let mut tap_of: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        if taps.is_some() {
            for p in self.prunable_layers() {
                tap_of.entry(self.activation_tap(p)).or_default().push(p);
            }
        }
        let mut params = Vec::new();
        let mut cur = tape.leaf_from(&input.shape, input.data.clone(), false);
        for i in 0..self.layers.len() {
            let kind = self.layers[i].kind.clone();
            let layer = &mut self.layers[i];
            cur = match kind {
                LayerKind::Dense { .. } | LayerKind::OutputDense { .. } => {
                    let w = tape.leaf(layer.weight.as_ref().unwrap());
                    let b = tape.leaf(layer.bias.as_ref().unwrap());
                    params.push((i, Slot::Weight, w));
                    params.push((i, Slot::Bias, b));
                    tape.affine(cur, w, b)?
                }
                LayerKind::Conv1d {
                    stride,
                    dilation,
                    padding,
                    ..
                } => {
                    let w = tape.leaf(layer.weight.as_ref().unwrap());
                    let b = tape.leaf(layer.bias.as_ref().unwrap());
                    params.push((i, Slot::Weight, w));
                    params.push((i, Slot::Bias, b));
                    tape.conv1d(cur, w, b, stride, dilation, padding)?
                }
                LayerKind::BatchNorm { .. } => {
                    let g = tape.leaf(layer.gamma.as_ref().unwrap());
                    let be = tape.leaf(layer.beta.as_ref().unwrap());
                    params.push((i, Slot::Gamma, g));
                    params.push((i, Slot::Beta, be));
                    let rm = layer.running_mean.as_mut().unwrap();
                    let rv = layer.running_var.as_mut().unwrap();
                    tape.batchnorm(cur, g, be, rm, rv, 0.1, mode)?
                }
                LayerKind::Relu => tape.relu(cur),
                LayerKind::MaxPool { window } => tape.maxpool1d(cur, window)?,
                LayerKind::Dropout { p } => match mode {
                    // Eval-mode dropout is the exact identity: no node at all.
                    Mode::Eval => cur,
                    Mode::Train => tape.dropout(cur, p, rng)?,
                },
                LayerKind::Flatten => {
                    let shape = tape.shape(cur);
                    if shape.len() != 3 {
                        return Err(Error::shape(format!(
                            "layer {i}: flatten expects [B, C, L], got {shape:?}"
                        )));
                    }
                    // Row-major [B, C, L] is already [B, C·L] in memory.
                    let flat = [shape[0], shape[1] * shape[2]];
                    tape.reshape(cur, &flat)?
                }
            };
            let out = tape.data(cur);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: i,
                    what: self.layers[i].kind.name().to_string(),
                });
            }
            if let Some(sums) = taps.as_deref_mut() {
                if let Some(sources) = tap_of.get(&i) {
                    let shape = tape.shape(cur);
                    let (ch, len) = match shape.len() {
                        3 => (shape[1], shape[2]),
                        2 => (shape[1], 1),
                        _ => (0, 0),
                    };
                    let batch = shape[0];
                    let data = tape.data(cur);
                    for &src in sources {
                        let acc = sums.entry(src).or_insert_with(|| vec![0.0f64; ch]);
                        if acc.len() != ch {
                            return Err(Error::contract(format!(
                                "activation tap width changed for layer {src}"
                            )));
                        }
                        for bi in 0..batch {
                            for c in 0..ch {
                                let base = (bi * ch + c) * len;
                                let mut s = 0.0f64;
                                for t in 0..len {
                                    s += f64::from(data[base + t].abs());
                                }
                                acc[c] += s;
                            }
                        }
                    }
                }
            }
        }
        Ok(ForwardPass {
            logits: cur,
            params,
        })
    }

    /// Inference entry point: runs the forward pass and applies the model's
    /// output activation, returning a plain tensor.
    pub fn forward(&mut self, input: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward_on_tape(&mut tape, input, mode, rng, None)?;
        let out = match self.output_activation {
            OutputActivation::None => pass.logits,
            OutputActivation::Softmax => tape.softmax(pass.logits)?,
            OutputActivation::Sigmoid => tape.sigmoid(pass.logits),
        };
        Tensor::new(tape.shape(out), tape.data(out).to_vec())
    }

    /// Total trainable parameters: weights, biases, and batch-norm scale and
    /// shift. Running statistics are estimates, not parameters, and are
    /// excluded.
    pub fn count_params(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| {
                [&l.weight, &l.bias, &l.gamma, &l.beta]
                    .into_iter()
                    .flatten()
                    .map(|t| t.len() as u64)
                    .sum::<u64>()
            })
            .sum()
    }

    /// Forward-pass FLOPs for one sample, counting multiplies and adds
    /// separately:
    ///
    /// * dense: `2·n_in·n_out + n_out` (multiply-add per weight plus bias)
    /// * conv1d: `L_out·(2·K·C_in + 1)·C_out`
    /// * batchnorm: 2 per element (scale, shift — the affine form)
    /// * relu: 1 per element; maxpool: `window − 1` comparisons per output
    /// * dropout, flatten: 0
    /// * softmax / sigmoid output activation: 4 per logit (exp amortized)
    pub fn count_flops(&self) -> Result<u64> {
        let trace = self.shape_trace()?;
        let mut total: u64 = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let out_elems: u64 = trace[i + 1].iter().product::<usize>() as u64;
            total += match &layer.kind {
                LayerKind::Dense { n_out, n_in } | LayerKind::OutputDense { n_out, n_in } => {
                    (2 * n_in * n_out + n_out) as u64
                }
                LayerKind::Conv1d {
                    c_out, c_in, kernel, ..
                } => {
                    let l_out = trace[i + 1][1] as u64;
                    l_out * (2 * (*kernel as u64) * (*c_in as u64) + 1) * (*c_out as u64)
                }
                LayerKind::BatchNorm { .. } => 2 * out_elems,
                LayerKind::Relu => out_elems,
                LayerKind::MaxPool { window } => (*window as u64 - 1) * out_elems,
                LayerKind::Dropout { .. } | LayerKind::Flatten => 0,
            };
        }
        if self.output_activation != OutputActivation::None {
            let logits: u64 = trace.last().unwrap().iter().product::<usize>() as u64;
            total += 4 * logits;
        }
        Ok(total)
    }

    /// Estimated peak working-set bytes for a forward pass at the given
    /// batch size: 4 bytes per parameter plus, for the widest layer, its
    /// live input and output activations.
    pub fn estimate_memory(&self, batch: usize) -> Result<u64> {
        if self.layers.is_empty() {
            return Err(Error::contract("cannot size an empty model"));
        }
        if batch == 0 {
            return Err(Error::range("batch size must be positive"));
        }
        let trace = self.shape_trace()?;
        let mut peak: u64 = 0;
        for i in 0..self.layers.len() {
            let inp: u64 = trace[i].iter().product::<usize>() as u64;
            let out: u64 = trace[i + 1].iter().product::<usize>() as u64;
            peak = peak.max(inp + out);
        }
        Ok(4 * (self.count_params() + batch as u64 * peak))
    }

    /// Mutable view of one parameter tensor's data. Panics if the layer has
    /// no such slot; callers pass (layer, slot) pairs from a forward pass.
    pub fn param_mut(&mut self, layer: usize, slot: Slot) -> &mut [f32] {
        let l = &mut self.layers[layer];
        let t = match slot {
            Slot::Weight => l.weight.as_mut(),
            Slot::Bias => l.bias.as_mut(),
            Slot::Gamma => l.gamma.as_mut(),
            Slot::Beta => l.beta.as_mut(),
        };
        &mut t.expect("parameter slot exists").data
    }

    /// Applies the model's mask (if any), forcing masked weights to zero.
    pub fn apply_mask(&mut self) {
        let Some(mask) = &self.mask else { return };
        for (layer, m) in self.layers.iter_mut().zip(&mask.layers) {
            if let (Some(w), Some(m)) = (layer.weight.as_mut(), m.as_ref()) {
                for (wv, &mv) in w.data.iter_mut().zip(m) {
                    if mv == 0.0 {
                        *wv = 0.0;
                    }
                }
            }
        }
    }

    /// Trainable parameters minus masked-out weights: what is actually free
    /// to move during training.
    pub fn effective_params(&self) -> u64 {
        let masked = self.mask.as_ref().map_or(0, ModelMask::zero_count) as u64;
        self.count_params() - masked
    }

    /// Internal consistency check: parameter shapes match the layer kinds
    /// and provenance lists match unit counts. Used after checkpoint loads
    /// and in tests.
    pub fn validate(&self) -> Result<()> {
        let trace = self.shape_trace()?;
        let _ = trace;
        for (i, l) in self.layers.iter().enumerate() {
            let bad = |what: &str| {
                Err(Error::contract(format!(
                    "layer {i} ({}): inconsistent {what}",
                    l.kind.name()
                )))
            };
            match &l.kind {
                LayerKind::Dense { n_out, n_in } | LayerKind::OutputDense { n_out, n_in } => {
                    match (&l.weight, &l.bias) {
                        (Some(w), Some(b))
                            if w.shape == [*n_out, *n_in] && b.shape == [*n_out] => {}
                        _ => return bad("weight/bias shapes"),
                    }
                }
                LayerKind::Conv1d {
                    c_out, c_in, kernel, ..
                } => match (&l.weight, &l.bias) {
                    (Some(w), Some(b))
                        if w.shape == [*c_out, *c_in, *kernel] && b.shape == [*c_out] => {}
                    _ => return bad("weight/bias shapes"),
                },
                LayerKind::BatchNorm { channels } => {
                    let ok = l.gamma.as_ref().is_some_and(|g| g.shape == [*channels])
                        && l.beta.as_ref().is_some_and(|b| b.shape == [*channels])
                        && l.running_mean.as_ref().is_some_and(|m| m.len() == *channels)
                        && l.running_var.as_ref().is_some_and(|v| v.len() == *channels);
                    if !ok {
                        return bad("batchnorm parameter shapes");
                    }
                }
                _ => {}
            }
            if let Some(kept) = &l.kept {
                let width = match &l.kind {
                    LayerKind::BatchNorm { channels } => Some(*channels),
                    LayerKind::OutputDense { n_out, .. } => Some(*n_out),
                    k => k.unit_count(),
                };
                match width {
                    Some(w) if kept.len() == w => {}
                    _ => return bad("kept-unit provenance length"),
                }
                if !kept.windows(2).all(|p| p[0] < p[1]) {
                    return bad("kept-unit ordering (must be strictly increasing)");
                }
            }
        }
        if let Some(mask) = &self.mask {
            if mask.layers.len() != self.layers.len() {
                return Err(Error::contract("mask layer count mismatch"));
            }
            for (i, (l, m)) in self.layers.iter().zip(&mask.layers).enumerate() {
                match (&l.weight, m) {
                    (Some(w), Some(m)) if w.len() == m.len() => {}
                    (None, None) => {}
                    _ => return Err(Error::contract(format!("mask shape mismatch at layer {i}"))),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn dense_stack() -> ModelGraph {
        build_model(
            &[
                LayerSpec::Dense { n_out: 5, prunable: true },
                LayerSpec::Relu,
                LayerSpec::OutputDense { n_out: 2 },
            ],
            &[10],
            OutputActivation::Softmax,
            42,
        )
        .unwrap()
    }

    #[test]
    fn param_count_dense_fixture() {
        // dense 10->5 (55) + output 5->2 (12) = 67
        assert_eq!(dense_stack().count_params(), 67);
    }

    #[test]
    fn param_count_conv_fixture() {
        // conv with 2 input channels, 3 output channels, kernel 5:
        // 3*2*5 weights + 3 biases = 33 (plus the output head, subtracted off)
        let m = build_model(
            &[
                LayerSpec::Conv1d {
                    c_out: 3,
                    kernel: 5,
                    stride: 1,
                    dilation: 1,
                    padding: 0,
                    prunable: true,
                },
                LayerSpec::Flatten,
                LayerSpec::OutputDense { n_out: 2 },
            ],
            &[2, 8],
            OutputActivation::Softmax,
            0,
        )
        .unwrap();
        let head = 2 * (3 * 4) + 2; // output dense on 12 flattened features
        assert_eq!(m.count_params() - head as u64, 33);
    }

    #[test]
    fn flops_dense_fixture() {
        // A single 3->2 output layer: 2*3*2 + 2 = 14 (activation none).
        let m = build_model(
            &[LayerSpec::OutputDense { n_out: 2 }],
            &[3],
            OutputActivation::None,
            0,
        )
        .unwrap();
        assert_eq!(m.count_flops().unwrap(), 14);
    }

    #[test]
    fn flops_conv_fixture() {
        // conv 1->2 channels, kernel 3, stride 1 on length 6: L_out = 4,
        // flops = 4*(2*3*1 + 1)*2 = 56; head adds 2*8*2+2 = 34, relu 0...
        let m = build_model(
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
            &[1, 6],
            OutputActivation::None,
            0,
        )
        .unwrap();
        let head = 2 * 8 * 2 + 2;
        assert_eq!(m.count_flops().unwrap(), 56 + head as u64);
    }

    #[test]
    fn memory_hand_trace() {
        // conv 1->2 k3 on [1,6] -> [2,4]; flatten; dense 8->2.
        // params = 8 + 18 = 26; widest layer flatten: 8 in + 8 out = 16/sample;
        // batch 2 -> 4*(26 + 2*16) = 232 bytes.
        let m = build_model(
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
            &[1, 6],
            OutputActivation::None,
            0,
        )
        .unwrap();
        assert_eq!(m.estimate_memory(2).unwrap(), 232);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = dense_stack();
        let b = dense_stack();
        assert_eq!(a, b);
        let c = build_model(
            &[
                LayerSpec::Dense { n_out: 5, prunable: true },
                LayerSpec::Relu,
                LayerSpec::OutputDense { n_out: 2 },
            ],
            &[10],
            OutputActivation::Softmax,
            43,
        )
        .unwrap();
        assert_ne!(a.layers[0].weight, c.layers[0].weight);
    }

    #[test]
    fn forward_softmax_rows_sum_to_one() {
        let mut m = dense_stack();
        let input = Tensor::new(&[3, 10], (0..30).map(|i| (i as f32) * 0.1 - 1.5).collect()).unwrap();
        let out = m.forward(&input, Mode::Eval, &mut rng()).unwrap();
        assert_eq!(out.shape, vec![3, 2]);
        for bi in 0..3 {
            let s: f32 = out.data[bi * 2..bi * 2 + 2].iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn forward_conv_pipeline_shapes() {
        let mut m = build_model(
            &[
                LayerSpec::Conv1d {
                    c_out: 4,
                    kernel: 5,
                    stride: 2,
                    dilation: 1,
                    padding: 2,
                    prunable: true,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { n_out: 6, prunable: true },
                LayerSpec::Relu,
                LayerSpec::OutputDense { n_out: 3 },
            ],
            &[1, 16],
            OutputActivation::Softmax,
            7,
        )
        .unwrap();
        // conv: (16 + 4 - 5)/2 + 1 = 8 -> [4, 8]; pool -> [4, 4]; flat 16.
        let trace = m.shape_trace().unwrap();
        assert_eq!(trace[1], vec![4, 8]);
        assert_eq!(trace[4], vec![4, 4]);
        assert_eq!(trace[5], vec![16]);
        let input = Tensor::new(&[2, 1, 16], vec![0.25; 32]).unwrap();
        let out = m.forward(&input, Mode::Train, &mut rng()).unwrap();
        assert_eq!(out.shape, vec![2, 3]);
    }

    #[test]
    fn builder_rejects_bad_chains() {
        // Dense on [C, L] input without a flatten.
        assert!(build_model(
            &[LayerSpec::OutputDense { n_out: 2 }],
            &[2, 8],
            OutputActivation::None,
            0,
        )
        .is_err());
        // Output layer not last.
        assert!(build_model(
            &[
                LayerSpec::OutputDense { n_out: 2 },
                LayerSpec::Relu,
            ],
            &[4],
            OutputActivation::None,
            0,
        )
        .is_err());
        // Missing output layer.
        assert!(build_model(
            &[LayerSpec::Dense { n_out: 2, prunable: true }],
            &[4],
            OutputActivation::None,
            0,
        )
        .is_err());
        // Empty model.
        assert!(build_model(&[], &[4], OutputActivation::None, 0).is_err());
        // Maxpool window larger than the sequence.
        assert!(build_model(
            &[
                LayerSpec::Conv1d { c_out: 2, kernel: 3, stride: 1, dilation: 1, padding: 0, prunable: true },
                LayerSpec::MaxPool { window: 20 },
                LayerSpec::Flatten,
                LayerSpec::OutputDense { n_out: 2 },
            ],
            &[1, 8],
            OutputActivation::None,
            0,
        )
        .is_err());
    }

    #[test]
    fn followed_by_batchnorm_is_detected() {
        let m = build_model(
            &[
                LayerSpec::Conv1d { c_out: 2, kernel: 3, stride: 1, dilation: 1, padding: 0, prunable: true },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { n_out: 4, prunable: true },
                LayerSpec::Relu,
                LayerSpec::OutputDense { n_out: 2 },
            ],
            &[1, 8],
            OutputActivation::None,
            0,
        )
        .unwrap();
        assert!(m.layers[0].followed_by_batchnorm);
        assert!(!m.layers[4].followed_by_batchnorm);
        assert_eq!(m.prunable_layers(), vec![0, 4]);
    }

    #[test]
    fn activation_tap_stops_at_pooling() {
        let m = build_model(
            &[
                LayerSpec::Conv1d { c_out: 2, kernel: 3, stride: 1, dilation: 1, padding: 0, prunable: true },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::OutputDense { n_out: 2 },
            ],
            &[1, 8],
            OutputActivation::None,
            0,
        )
        .unwrap();
        // Tap sits on the relu (index 2), not past the pool.
        assert_eq!(m.activation_tap(0), 2);
    }

    #[test]
    fn mask_bookkeeping() {
        let mut m = dense_stack();
        let mut mask = ModelMask::ones(&m);
        assert_eq!(mask.total(), 60); // 50 + 10 weights, biases excluded
        assert_eq!(mask.zero_count(), 0);
        mask.layers[0].as_mut().unwrap()[3] = 0.0;
        m.mask = Some(mask);
        m.apply_mask();
        assert_eq!(m.layers[0].weight.as_ref().unwrap().data[3], 0.0);
        assert_eq!(m.effective_params(), 66);
        m.validate().unwrap();
    }

    #[test]
    fn validate_catches_corruption() {
        let mut m = dense_stack();
        m.validate().unwrap();
        m.layers[0].kept = Some(vec![4, 2, 1, 0, 3]);
        assert!(m.validate().is_err());
    }
}
