//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! A [`Tape`] owns every intermediate tensor of one forward pass. Operations
//! append nodes and return opaque [`Value`] handles; [`Tape::backward`]
//! consumes the tape, walks the nodes in reverse, and accumulates gradients
//! for every value that (transitively) requires them.
//!
//! Shapes follow a fixed convention: activations are `[batch, features]` or
//! `[batch, channels, length]`, weights are `[n_out, n_in]` for dense layers
//! and `[c_out, c_in, kernel]` for 1-D convolutions.

use super::{axpy, dot, Mode, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to a value stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

/// One recorded operation. Saved fields are whatever backward needs.
#[derive(Debug)]
pub enum Op {
    Leaf,
    /// `y = x · wᵀ + b`
    Affine { x: usize, w: usize, b: usize },
    /// 1-D convolution with zero padding.
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    },
    /// Batch normalization; `mean`/`inv_std` are the per-channel statistics
    /// actually used (batch stats in training, running stats in eval).
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        train_stats: bool,
    },
    Relu { x: usize },
    /// Non-overlapping max pooling (stride = window). `argmax` holds, per
    /// output element, the flat index into the input that won.
    MaxPool { x: usize, argmax: Vec<u32> },
    /// Training-mode dropout; `factor[i]` is 0 (dropped) or 1/(1-p).
    Dropout { x: usize, factor: Vec<f32> },
    /// Row-wise softmax over the last dimension.
    Softmax { x: usize },
    Sigmoid { x: usize },
    /// Mean cross-entropy from logits (fused log-softmax). `probs` holds the
    /// row-wise softmax computed during the forward pass.
    CrossEntropy {
        logits: usize,
        targets: Vec<u32>,
        probs: Vec<f32>,
    },
    /// Mean binary cross-entropy from probabilities. Inputs are clamped to
    /// `[1e-7, 1 - 1e-7]`; outside the clamp the gradient is exactly zero.
    Bce { prob: usize, targets: Vec<f32> },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// Sum of all elements, producing a scalar.
    Sum { x: usize },
    Scale { x: usize, c: f32 },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Value`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if one was accumulated.
    pub fn get(&self, v: Value) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Like [`get`](Self::get) but takes ownership of the buffer.
    pub fn take(&mut self, v: Value) -> Option<Vec<f32>> {
        self.grads[v.0].take()
    }
}

/// Clamp bounds for binary cross-entropy probabilities.
pub const BCE_CLAMP: f32 = 1e-7;
/// Epsilon added to the variance inside batch normalization.
pub const BN_EPS: f32 = 1e-5;

/// The operation tape. Create one per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Op) -> Value {
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Value(self.nodes.len() - 1)
    }

    fn requires(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Value {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    /// Records a leaf directly from a shape and buffer.
    pub fn leaf_from(&mut self, shape: &[usize], data: Vec<f32>, requires_grad: bool) -> Value {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape.to_vec(), data, requires_grad, Op::Leaf)
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Value) -> &[f32] {
        &self.nodes[v.0].data
    }

    /// The single element of a scalar value.
    pub fn scalar(&self, v: Value) -> Result<f32> {
        let n = &self.nodes[v.0];
        if n.data.len() != 1 {
            return Err(Error::contract(format!(
                "expected a scalar, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.data[0])
    }

    /// `y[b, o] = Σ_i x[b, i]·w[o, i] + bias[o]`
    pub fn affine(&mut self, x: Value, w: Value, b: Value) -> Result<Value> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::shape(format!(
                "affine wants x [B,I], w [O,I], b [O]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (batch, n_in) = (xs[0], xs[1]);
        let (n_out, w_in) = (ws[0], ws[1]);
        if w_in != n_in || bs[0] != n_out {
            return Err(Error::shape(format!(
                "affine dims disagree: x [.,{n_in}], w [{n_out},{w_in}], b [{}]",
                bs[0]
            )));
        }
        let mut out = vec![0.0f32; batch * n_out];
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(b);
        for bi in 0..batch {
            let row = &xd[bi * n_in..(bi + 1) * n_in];
            let orow = &mut out[bi * n_out..(bi + 1) * n_out];
            for o in 0..n_out {
                orow[o] = dot(row, &wd[o * n_in..(o + 1) * n_in]) + bd[o];
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(
            vec![batch, n_out],
            out,
            rg,
            Op::Affine {
                x: x.0,
                w: w.0,
                b: b.0,
            },
        ))
    }

    /// Output length of a 1-D convolution, or an error if no window fits.
    pub fn conv1d_out_len(
        len: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<usize> {
        if kernel == 0 || stride == 0 || dilation == 0 {
            return Err(Error::range(
                "conv1d kernel, stride and dilation must be positive",
            ));
        }
        let span = dilation * (kernel - 1) + 1;
        let padded = len + 2 * padding;
        if span > padded {
            return Err(Error::shape(format!(
                "conv1d kernel span {span} exceeds padded input length {padded}"
            )));
        }
        Ok((padded - span) / stride + 1)
    }

    /// `y[b, co, t] = bias[co] + Σ_{ci,j} w[co,ci,j]·x[b, ci, t·s + j·d − p]`
    /// with zero padding outside the input.
    pub fn conv1d(
        &mut self,
        x: Value,
        w: Value,
        b: Value,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Value> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 {
            return Err(Error::shape(format!(
                "conv1d wants x [B,C,L], w [Co,Ci,K], b [Co]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
        let (c_out, w_ci, kernel) = (ws[0], ws[1], ws[2]);
        if w_ci != c_in || bs[0] != c_out {
            return Err(Error::shape(format!(
                "conv1d dims disagree: x [.,{c_in},.], w [{c_out},{w_ci},{kernel}], b [{}]",
                bs[0]
            )));
        }
        let l_out = Self::conv1d_out_len(len, kernel, stride, dilation, padding)?;
        let mut out = vec![0.0f32; batch * c_out * l_out];
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(b);
        for bi in 0..batch {
            for co in 0..c_out {
                let orow = &mut out[(bi * c_out + co) * l_out..(bi * c_out + co + 1) * l_out];
                orow.fill(bd[co]);
                for ci in 0..c_in {
                    let xrow = &xd[(bi * c_in + ci) * len..(bi * c_in + ci + 1) * len];
                    let wrow = &wd[(co * c_in + ci) * kernel..(co * c_in + ci + 1) * kernel];
                    for (j, &wj) in wrow.iter().enumerate() {
                        conv_tap_fwd(wj, xrow, orow, len, l_out, stride, j * dilation, padding);
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(
            vec![batch, c_out, l_out],
            out,
            rg,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                dilation,
                padding,
            },
        ))
    }

    /// Batch normalization over `[B, C]` or `[B, C, L]` inputs.
    ///
    /// Training mode normalizes with the biased batch statistics (computed
    /// over batch and, for 3-D inputs, time) and updates `running_mean` /
    /// `running_var` in place with momentum `momentum`. Eval mode uses the
    /// running statistics unchanged. A training batch of size 1 is rejected
    /// because its variance is degenerate.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        running_mean: &mut [f32],
        running_var: &mut [f32],
        momentum: f32,
        mode: Mode,
    ) -> Result<Value> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 && xs.len() != 3 {
            return Err(Error::shape(format!(
                "batchnorm wants [B,C] or [B,C,L], got {xs:?}"
            )));
        }
        let (batch, ch) = (xs[0], xs[1]);
        let len = if xs.len() == 3 { xs[2] } else { 1 };
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(Error::shape(format!(
                "batchnorm gamma/beta must have shape [{ch}]"
            )));
        }
        if running_mean.len() != ch || running_var.len() != ch {
            return Err(Error::shape(format!(
                "batchnorm running stats must have length {ch}"
            )));
        }
        if mode == Mode::Train && batch < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batchnorm cannot estimate variance from a training batch of size {batch}"
            )));
        }
        let n = batch * len;
        let xd = self.data(x).to_vec();
        let (mean, var): (Vec<f32>, Vec<f32>) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0f32; ch];
                let mut var = vec![0.0f32; ch];
                for c in 0..ch {
                    let mut s = 0.0f64;
                    for bi in 0..batch {
                        let row = &xd[(bi * ch + c) * len..(bi * ch + c + 1) * len];
                        for &v in row {
                            s += f64::from(v);
                        }
                    }
                    let m = (s / n as f64) as f32;
                    let mut q = 0.0f64;
                    for bi in 0..batch {
                        let row = &xd[(bi * ch + c) * len..(bi * ch + c + 1) * len];
                        for &v in row {
                            let d = f64::from(v - m);
                            q += d * d;
                        }
                    }
                    mean[c] = m;
                    var[c] = (q / n as f64) as f32;
                }
                for c in 0..ch {
                    running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean[c];
                    running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var[c];
                }
                (mean, var)
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gd = self.data(gamma).to_vec();
        let bd = self.data(beta).to_vec();
        let mut out = vec![0.0f32; xd.len()];
        for bi in 0..batch {
            for c in 0..ch {
                let scale = gd[c] * inv_std[c];
                let shift = bd[c] - mean[c] * scale;
                let base = (bi * ch + c) * len;
                for t in 0..len {
                    out[base + t] = xd[base + t] * scale + shift;
                }
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            xs,
            out,
            rg,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                inv_std,
                train_stats: mode == Mode::Train,
            },
        ))
    }

    /// Elementwise `max(0, x)`.
    pub fn relu(&mut self, x: Value) -> Value {
        let data: Vec<f32> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(shape, data, rg, Op::Relu { x: x.0 })
    }

    /// Non-overlapping max pooling over the last dimension (stride = window).
    /// Ties go to the first maximum; gradients route only to the winner.
    pub fn maxpool1d(&mut self, x: Value, window: usize) -> Result<Value> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape(format!("maxpool1d wants [B,C,L], got {xs:?}")));
        }
        if window == 0 {
            return Err(Error::range("maxpool1d window must be positive"));
        }
        let (batch, ch, len) = (xs[0], xs[1], xs[2]);
        if window > len {
            return Err(Error::shape(format!(
                "maxpool1d window {window} exceeds input length {len}"
            )));
        }
        let l_out = len / window;
        let xd = self.data(x);
        let mut out = vec![0.0f32; batch * ch * l_out];
        let mut argmax = vec![0u32; batch * ch * l_out];
        for bc in 0..batch * ch {
            let row = &xd[bc * len..bc * len + len];
            for t in 0..l_out {
                let start = t * window;
                let mut best = row[start];
                let mut best_i = start;
                for i in start + 1..start + window {
                    if row[i] > best {
                        best = row[i];
                        best_i = i;
                    }
                }
                out[bc * l_out + t] = best;
                argmax[bc * l_out + t] = (bc * len + best_i) as u32;
            }
        }
        let rg = self.requires(x);
        Ok(self.push(
            vec![batch, ch, l_out],
            out,
            rg,
            Op::MaxPool { x: x.0, argmax },
        ))
    }

    /// Training-mode dropout: each element is dropped with probability `p`
    /// and survivors are scaled by `1/(1-p)`. Use `Mode::Eval` forward paths
    /// simply by not calling this (eval dropout is the identity).
    pub fn dropout(&mut self, x: Value, p: f32, rng: &mut ChaCha8Rng) -> Result<Value> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::range(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        let scale = 1.0 / (1.0 - p);
        let factor: Vec<f32> = self
            .data(x)
            .iter()
            .map(|_| if rng.gen::<f32>() < p { 0.0 } else { scale })
            .collect();
        let data: Vec<f32> = self
            .data(x)
            .iter()
            .zip(&factor)
            .map(|(&v, &f)| v * f)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(shape, data, rg, Op::Dropout { x: x.0, factor }))
    }

    /// Row-wise softmax over the last dimension of a `[B, K]` input.
    pub fn softmax(&mut self, x: Value) -> Result<Value> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape(format!("softmax wants [B,K], got {xs:?}")));
        }
        let (batch, k) = (xs[0], xs[1]);
        let xd = self.data(x);
        let mut out = vec![0.0f32; xd.len()];
        for bi in 0..batch {
            let row = &xd[bi * k..(bi + 1) * k];
            let orow = &mut out[bi * k..(bi + 1) * k];
            softmax_row(row, orow);
        }
        let rg = self.requires(x);
        Ok(self.push(xs, out, rg, Op::Softmax { x: x.0 }))
    }

    /// Elementwise logistic sigmoid.
    pub fn sigmoid(&mut self, x: Value) -> Value {
        let data: Vec<f32> = self
            .data(x)
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(shape, data, rg, Op::Sigmoid { x: x.0 })
    }

    /// Mean cross-entropy between logits `[B, K]` and class indices,
    /// computed through a fused, numerically stable log-softmax.
    pub fn cross_entropy(&mut self, logits: Value, targets: &[u32]) -> Result<Value> {
        let xs = self.shape(logits).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape(format!(
                "cross_entropy wants logits [B,K], got {xs:?}"
            )));
        }
        let (batch, k) = (xs[0], xs[1]);
        if targets.len() != batch {
            return Err(Error::shape(format!(
                "cross_entropy got {} targets for a batch of {batch}",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= k) {
            return Err(Error::range(format!(
                "class index {t} out of range for {k} classes"
            )));
        }
        let xd = self.data(logits);
        let mut probs = vec![0.0f32; xd.len()];
        let mut loss = 0.0f64;
        for bi in 0..batch {
            let row = &xd[bi * k..(bi + 1) * k];
            let prow = &mut probs[bi * k..(bi + 1) * k];
            let lse = softmax_row(row, prow);
            loss += f64::from(lse - row[targets[bi] as usize]);
        }
        let mean = (loss / batch as f64) as f32;
        let rg = self.requires(logits);
        Ok(self.push(
            vec![1],
            vec![mean],
            rg,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy between probabilities and 0/1 targets.
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]` before the logs, and
    /// the gradient is exactly zero where the clamp is active.
    pub fn binary_cross_entropy(&mut self, prob: Value, targets: &[f32]) -> Result<Value> {
        let n = self.data(prob).len();
        if targets.len() != n {
            return Err(Error::shape(format!(
                "binary_cross_entropy got {} targets for {n} probabilities",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::range(format!("binary target {t} outside [0, 1]")));
        }
        if n == 0 {
            return Err(Error::contract("binary_cross_entropy on an empty batch"));
        }
        let mut loss = 0.0f64;
        for (&p, &t) in self.data(prob).iter().zip(targets) {
            let q = f64::from(p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP));
            loss -= f64::from(t) * q.ln() + (1.0 - f64::from(t)) * (1.0 - q).ln();
        }
        let mean = (loss / n as f64) as f32;
        let rg = self.requires(prob);
        Ok(self.push(
            vec![1],
            vec![mean],
            rg,
            Op::Bce {
                prob: prob.0,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Elementwise sum of two equally shaped values.
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add wants equal shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, data, rg, Op::Add { a: a.0, b: b.0 }))
    }

    /// Elementwise product of two equally shaped values.
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "mul wants equal shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, data, rg, Op::Mul { a: a.0, b: b.0 }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Value) -> Value {
        let mut s = 0.0f64;
        for &v in self.data(x) {
            s += f64::from(v);
        }
        let rg = self.requires(x);
        self.push(vec![1], vec![s as f32], rg, Op::Sum { x: x.0 })
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, x: Value, c: f32) -> Value {
        let data: Vec<f32> = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(shape, data, rg, Op::Scale { x: x.0, c })
    }

    /// Reinterprets `x` under a new shape with the same element count
    /// (row-major data is untouched). Gradients pass straight through.
    pub fn reshape(&mut self, x: Value, shape: &[usize]) -> Result<Value> {
        let want: usize = shape.iter().product();
        if want != self.data(x).len() {
            return Err(Error::shape(format!(
                "reshape to {:?} needs {want} elements, value has {}",
                shape,
                self.data(x).len()
            )));
        }
        let data = self.data(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(shape.to_vec(), data, rg, Op::Scale { x: x.0, c: 1.0 }))
    }

    /// Runs backpropagation from the scalar `loss`, consuming the tape.
    ///
    /// Gradients are accumulated additively (values used several times sum
    /// their contributions) and are retained for leaves; intermediate
    /// buffers are dropped as soon as they have been consumed.
    pub fn backward(self, loss: Value) -> Result<Gradients> {
        let nodes = self.nodes;
        if nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        // Adds `src` into the gradient buffer of node `i`, allocating lazily.
        // Split out as a macro so the borrow of `nodes` stays local.
        macro_rules! accum {
            ($i:expr, $f:expr) => {{
                let i = $i;
                if nodes[i].requires_grad {
                    let g = grads[i].get_or_insert_with(|| vec![0.0f32; nodes[i].data.len()]);
                    $f(g.as_mut_slice());
                }
            }};
        }

        for i in (0..nodes.len()).rev() {
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            if !nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Affine { x, w, b } => {
                    let (batch, n_out) = (node.shape[0], node.shape[1]);
                    let n_in = nodes[*x].shape[1];
                    let xd = &nodes[*x].data;
                    let wd = &nodes[*w].data;
                    accum!(*x, |gx: &mut [f32]| {
                        for bi in 0..batch {
                            let grow = &g[bi * n_out..(bi + 1) * n_out];
                            let xrow = &mut gx[bi * n_in..(bi + 1) * n_in];
                            for o in 0..n_out {
                                axpy(grow[o], &wd[o * n_in..(o + 1) * n_in], xrow);
                            }
                        }
                    });
                    accum!(*w, |gw: &mut [f32]| {
                        for bi in 0..batch {
                            let grow = &g[bi * n_out..(bi + 1) * n_out];
                            let xrow = &xd[bi * n_in..(bi + 1) * n_in];
                            for o in 0..n_out {
                                axpy(grow[o], xrow, &mut gw[o * n_in..(o + 1) * n_in]);
                            }
                        }
                    });
                    accum!(*b, |gb: &mut [f32]| {
                        for bi in 0..batch {
                            for o in 0..n_out {
                                gb[o] += g[bi * n_out + o];
                            }
                        }
                    });
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    stride,
                    dilation,
                    padding,
                } => {
                    let (batch, c_out, l_out) = (node.shape[0], node.shape[1], node.shape[2]);
                    let (c_in, len) = (nodes[*x].shape[1], nodes[*x].shape[2]);
                    let kernel = nodes[*w].shape[2];
                    let xd = &nodes[*x].data;
                    let wd = &nodes[*w].data;
                    accum!(*b, |gb: &mut [f32]| {
                        for bi in 0..batch {
                            for co in 0..c_out {
                                let grow =
                                    &g[(bi * c_out + co) * l_out..(bi * c_out + co + 1) * l_out];
                                let mut s = 0.0f32;
                                for &v in grow {
                                    s += v;
                                }
                                gb[co] += s;
                            }
                        }
                    });
                    accum!(*w, |gw: &mut [f32]| {
                        for bi in 0..batch {
                            for co in 0..c_out {
                                let grow =
                                    &g[(bi * c_out + co) * l_out..(bi * c_out + co + 1) * l_out];
                                for ci in 0..c_in {
                                    let xrow =
                                        &xd[(bi * c_in + ci) * len..(bi * c_in + ci + 1) * len];
                                    let wrow = &mut gw[(co * c_in + ci) * kernel
                                        ..(co * c_in + ci + 1) * kernel];
                                    for (j, gwj) in wrow.iter_mut().enumerate() {
                                        *gwj += conv_tap_wgrad(
                                            grow,
                                            xrow,
                                            len,
                                            l_out,
                                            *stride,
                                            j * dilation,
                                            *padding,
                                        );
                                    }
                                }
                            }
                        }
                    });
                    accum!(*x, |gx: &mut [f32]| {
                        for bi in 0..batch {
                            for co in 0..c_out {
                                let grow =
                                    &g[(bi * c_out + co) * l_out..(bi * c_out + co + 1) * l_out];
                                for ci in 0..c_in {
                                    let xrow = &mut gx
                                        [(bi * c_in + ci) * len..(bi * c_in + ci + 1) * len];
                                    let wrow = &wd[(co * c_in + ci) * kernel
                                        ..(co * c_in + ci + 1) * kernel];
                                    for (j, &wj) in wrow.iter().enumerate() {
                                        conv_tap_xgrad(
                                            wj,
                                            grow,
                                            xrow,
                                            len,
                                            l_out,
                                            *stride,
                                            j * dilation,
                                            *padding,
                                        );
                                    }
                                }
                            }
                        }
                    });
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    train_stats,
                } => {
                    let (batch, ch) = (node.shape[0], node.shape[1]);
                    let len = if node.shape.len() == 3 {
                        node.shape[2]
                    } else {
                        1
                    };
                    let n = (batch * len) as f32;
                    let xd = &nodes[*x].data;
                    let gd = &nodes[*gamma].data;
                    accum!(*beta, |gb: &mut [f32]| {
                        for bi in 0..batch {
                            for c in 0..ch {
                                let base = (bi * ch + c) * len;
                                let mut s = 0.0f32;
                                for t in 0..len {
                                    s += g[base + t];
                                }
                                gb[c] += s;
                            }
                        }
                    });
                    accum!(*gamma, |gg: &mut [f32]| {
                        for bi in 0..batch {
                            for c in 0..ch {
                                let base = (bi * ch + c) * len;
                                let mut s = 0.0f32;
                                for t in 0..len {
                                    let xhat = (xd[base + t] - mean[c]) * inv_std[c];
                                    s += g[base + t] * xhat;
                                }
                                gg[c] += s;
                            }
                        }
                    });
                    accum!(*x, |gx: &mut [f32]| {
                        if *train_stats {
                            // Backprop through the batch statistics:
                            // gx = γ·inv_std/N · (N·g − Σg − x̂·Σ(g·x̂))
                            for c in 0..ch {
                                let mut sum_g = 0.0f32;
                                let mut sum_gx = 0.0f32;
                                for bi in 0..batch {
                                    let base = (bi * ch + c) * len;
                                    for t in 0..len {
                                        let xhat = (xd[base + t] - mean[c]) * inv_std[c];
                                        sum_g += g[base + t];
                                        sum_gx += g[base + t] * xhat;
                                    }
                                }
                                let k = gd[c] * inv_std[c] / n;
                                for bi in 0..batch {
                                    let base = (bi * ch + c) * len;
                                    for t in 0..len {
                                        let xhat = (xd[base + t] - mean[c]) * inv_std[c];
                                        gx[base + t] +=
                                            k * (n * g[base + t] - sum_g - xhat * sum_gx);
                                    }
                                }
                            }
                        } else {
                            // Running statistics are constants in eval mode.
                            for bi in 0..batch {
                                for c in 0..ch {
                                    let base = (bi * ch + c) * len;
                                    let k = gd[c] * inv_std[c];
                                    for t in 0..len {
                                        gx[base + t] += k * g[base + t];
                                    }
                                }
                            }
                        }
                    });
                }
                Op::Relu { x } => {
                    let xd = &nodes[*x].data;
                    accum!(*x, |gx: &mut [f32]| {
                        for (i, &v) in xd.iter().enumerate() {
                            if v > 0.0 {
                                gx[i] += g[i];
                            }
                        }
                    });
                }
                Op::MaxPool { x, argmax } => {
                    accum!(*x, |gx: &mut [f32]| {
                        for (o, &src) in argmax.iter().enumerate() {
                            gx[src as usize] += g[o];
                        }
                    });
                }
                Op::Dropout { x, factor } => {
                    accum!(*x, |gx: &mut [f32]| {
                        for i in 0..factor.len() {
                            gx[i] += g[i] * factor[i];
                        }
                    });
                }
                Op::Softmax { x } => {
                    let (batch, k) = (node.shape[0], node.shape[1]);
                    let yd = &node.data;
                    accum!(*x, |gx: &mut [f32]| {
                        for bi in 0..batch {
                            let y = &yd[bi * k..(bi + 1) * k];
                            let gr = &g[bi * k..(bi + 1) * k];
                            let mut dotgy = 0.0f32;
                            for j in 0..k {
                                dotgy += gr[j] * y[j];
                            }
                            let xr = &mut gx[bi * k..(bi + 1) * k];
                            for j in 0..k {
                                xr[j] += y[j] * (gr[j] - dotgy);
                            }
                        }
                    });
                }
                Op::Sigmoid { x } => {
                    let yd = &node.data;
                    accum!(*x, |gx: &mut [f32]| {
                        for i in 0..yd.len() {
                            gx[i] += g[i] * yd[i] * (1.0 - yd[i]);
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let batch = targets.len();
                    let k = nodes[*logits].shape[1];
                    let gs = g[0] / batch as f32;
                    accum!(*logits, |gx: &mut [f32]| {
                        for bi in 0..batch {
                            let t = targets[bi] as usize;
                            for j in 0..k {
                                let ind = if j == t { 1.0 } else { 0.0 };
                                gx[bi * k + j] += gs * (probs[bi * k + j] - ind);
                            }
                        }
                    });
                }
                Op::Bce { prob, targets } => {
                    let pd = &nodes[*prob].data;
                    let n = targets.len() as f32;
                    let gs = g[0] / n;
                    accum!(*prob, |gx: &mut [f32]| {
                        for i in 0..targets.len() {
                            let p = pd[i];
                            if p > BCE_CLAMP && p < 1.0 - BCE_CLAMP {
                                gx[i] += gs * (-targets[i] / p + (1.0 - targets[i]) / (1.0 - p));
                            }
                        }
                    });
                }
                Op::Add { a, b } => {
                    accum!(*a, |ga: &mut [f32]| {
                        for i in 0..g.len() {
                            ga[i] += g[i];
                        }
                    });
                    accum!(*b, |gb: &mut [f32]| {
                        for i in 0..g.len() {
                            gb[i] += g[i];
                        }
                    });
                }
                Op::Mul { a, b } => {
                    let ad = &nodes[*a].data;
                    let bd = &nodes[*b].data;
                    accum!(*a, |ga: &mut [f32]| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * bd[i];
                        }
                    });
                    accum!(*b, |gb: &mut [f32]| {
                        for i in 0..g.len() {
                            gb[i] += g[i] * ad[i];
                        }
                    });
                }
                Op::Sum { x } => {
                    accum!(*x, |gx: &mut [f32]| {
                        for v in gx.iter_mut() {
                            *v += g[0];
                        }
                    });
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    accum!(*x, |gx: &mut [f32]| {
                        for i in 0..g.len() {
                            gx[i] += c * g[i];
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Adds `w * x[window]` into the output row for one (kernel tap, channel)
/// pair. `offset = j*dilation`; input index for output t is
/// `t*stride + offset - padding`. The stride-1 case reduces to a single
/// contiguous `axpy`, which is the hot path.
#[inline]
fn conv_tap_fwd(
    w: f32,
    xrow: &[f32],
    orow: &mut [f32],
    len: usize,
    l_out: usize,
    stride: usize,
    offset: usize,
    padding: usize,
) {
    if stride == 1 {
        // Valid t range: 0 <= t + offset - padding < len
        let t0 = padding.saturating_sub(offset);
        let t1 = (len + padding - offset).min(l_out);
        if t0 >= t1 {
            return;
        }
        let x0 = t0 + offset - padding;
        axpy(w, &xrow[x0..x0 + (t1 - t0)], &mut orow[t0..t1]);
    } else {
        for (t, o) in orow.iter_mut().enumerate() {
            let idx = t * stride + offset;
            if idx >= padding && idx - padding < len {
                *o += w * xrow[idx - padding];
            }
        }
    }
}

/// Gradient of one kernel tap: `Σ_t g[t] * x[t*stride + offset - padding]`.
#[inline]
fn conv_tap_wgrad(
    grow: &[f32],
    xrow: &[f32],
    len: usize,
    l_out: usize,
    stride: usize,
    offset: usize,
    padding: usize,
) -> f32 {
    if stride == 1 {
        let t0 = padding.saturating_sub(offset);
        let t1 = (len + padding - offset).min(l_out);
        if t0 >= t1 {
            return 0.0;
        }
        let x0 = t0 + offset - padding;
        dot(&grow[t0..t1], &xrow[x0..x0 + (t1 - t0)])
    } else {
        let mut s = 0.0f32;
        for (t, &gt) in grow.iter().enumerate() {
            let idx = t * stride + offset;
            if idx >= padding && idx - padding < len {
                s += gt * xrow[idx - padding];
            }
        }
        s
    }
}

/// Scatters `w * g` back into the input-gradient row for one kernel tap.
#[inline]
#[allow(clippy::too_many_arguments)]
fn conv_tap_xgrad(
    w: f32,
    grow: &[f32],
    gxrow: &mut [f32],
    len: usize,
    l_out: usize,
    stride: usize,
    offset: usize,
    padding: usize,
) {
    if stride == 1 {
        let t0 = padding.saturating_sub(offset);
        let t1 = (len + padding - offset).min(l_out);
        if t0 >= t1 {
            return;
        }
        let x0 = t0 + offset - padding;
        axpy(w, &grow[t0..t1], &mut gxrow[x0..x0 + (t1 - t0)]);
    } else {
        for (t, &gt) in grow.iter().enumerate() {
            let idx = t * stride + offset;
            if idx >= padding && idx - padding < len {
                gxrow[idx - padding] += w * gt;
            }
        }
    }
}

/// Writes the softmax of `row` into `out` and returns the log-sum-exp.
#[inline]
fn softmax_row(row: &[f32], out: &mut [f32]) -> f32 {
    let mut m = f32::NEG_INFINITY;
    for &v in row {
        if v > m {
            m = v;
        }
    }
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    m + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn leaf(tape: &mut Tape, shape: &[usize], data: &[f32], rg: bool) -> Value {
        tape.leaf_from(shape, data.to_vec(), rg)
    }

    #[test]
    fn affine_identity_weight_passes_input_through() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 3], &[1.0, -2.0, 3.0], false);
        let w = leaf(&mut tape, &[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.], false);
        let b = leaf(&mut tape, &[3], &[0.0; 3], false);
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.data(y), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn affine_rejects_mismatched_dims() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 3], &[0.0; 3], false);
        let w = leaf(&mut tape, &[2, 4], &[0.0; 8], false);
        let b = leaf(&mut tape, &[2], &[0.0; 2], false);
        assert!(matches!(
            tape.affine(x, w, b),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn conv1d_known_answer() {
        // x = [1,2,3,4], w = [1,0,-1], stride 1, no padding:
        // y[t] = x[t] - x[t+2]  -> [-2, -2]
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 4], &[1.0, 2.0, 3.0, 4.0], false);
        let w = leaf(&mut tape, &[1, 1, 3], &[1.0, 0.0, -1.0], false);
        let b = leaf(&mut tape, &[1], &[0.0], false);
        let y = tape.conv1d(x, w, b, 1, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2]);
        assert_eq!(tape.data(y), &[-2.0, -2.0]);
    }

    #[test]
    fn conv1d_padding_extends_output() {
        // Same filter with padding 1: indices -1 and 4 read as zero.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 4], &[1.0, 2.0, 3.0, 4.0], false);
        let w = leaf(&mut tape, &[1, 1, 3], &[1.0, 0.0, -1.0], false);
        let b = leaf(&mut tape, &[1], &[0.0], false);
        let y = tape.conv1d(x, w, b, 1, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4]);
        assert_eq!(tape.data(y), &[-2.0, -2.0, -2.0, 3.0]);
    }

    #[test]
    fn conv1d_stride_and_dilation_lengths() {
        assert_eq!(Tape::conv1d_out_len(10, 3, 1, 1, 0).unwrap(), 8);
        assert_eq!(Tape::conv1d_out_len(10, 3, 2, 1, 0).unwrap(), 4);
        assert_eq!(Tape::conv1d_out_len(10, 3, 1, 2, 0).unwrap(), 6);
        assert_eq!(Tape::conv1d_out_len(10, 3, 1, 1, 1).unwrap(), 10);
        assert!(Tape::conv1d_out_len(2, 3, 1, 1, 0).is_err());
    }

    #[test]
    fn maxpool_picks_first_max_on_ties() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 4], &[1.0, 3.0, 2.0, 0.0], true);
        let y = tape.maxpool1d(x, 2).unwrap();
        assert_eq!(tape.data(y), &[3.0, 2.0]);

        // Tie within a window: gradient must go to the first position only.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 2], &[5.0, 5.0], true);
        let y = tape.maxpool1d(x, 2).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_oversized_window() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 3], &[0.0; 3], false);
        assert!(tape.maxpool1d(x, 4).is_err());
        assert!(tape.maxpool1d(x, 0).is_err());
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let mut tape = Tape::new();
        // Two samples, one channel: values 1 and 3 -> mean 2, var 1.
        let x = leaf(&mut tape, &[2, 1], &[1.0, 3.0], false);
        let g = leaf(&mut tape, &[1], &[1.0], false);
        let b = leaf(&mut tape, &[1], &[0.0], false);
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let y = tape
            .batchnorm(x, g, b, &mut rm, &mut rv, 0.1, Mode::Train)
            .unwrap();
        let out = tape.data(y);
        assert!((out[0] + 1.0).abs() < 1e-4, "{out:?}");
        assert!((out[1] - 1.0).abs() < 1e-4);
        // Running stats move 10% of the way toward the batch stats.
        assert!((rm[0] - 0.2).abs() < 1e-6);
        assert!((rv[0] - (0.9 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_train_batch_of_one_is_degenerate() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2], &[1.0, 2.0], false);
        let g = leaf(&mut tape, &[2], &[1.0, 1.0], false);
        let b = leaf(&mut tape, &[2], &[0.0, 0.0], false);
        let mut rm = vec![0.0; 2];
        let mut rv = vec![1.0; 2];
        let err = tape
            .batchnorm(x, g, b, &mut rm, &mut rv, 0.1, Mode::Train)
            .unwrap_err();
        assert!(matches!(err, crate::Error::DegenerateBatch(_)));
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1], &[3.0], false);
        let g = leaf(&mut tape, &[1], &[2.0], false);
        let b = leaf(&mut tape, &[1], &[0.5], false);
        let mut rm = vec![1.0];
        let mut rv = vec![4.0];
        let y = tape
            .batchnorm(x, g, b, &mut rm, &mut rv, 0.1, Mode::Eval)
            .unwrap();
        // (3 - 1)/sqrt(4 + eps) * 2 + 0.5 ≈ 2.5
        assert!((tape.data(y)[0] - 2.5).abs() < 1e-4);
        // Eval mode must not touch the running stats.
        assert_eq!(rm, vec![1.0]);
        assert_eq!(rv, vec![4.0]);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        // Train mode with p = 0.5: survivors are scaled by 2.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 8], &[1.0; 8], false);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        for &v in tape.data(y) {
            assert!(v == 0.0 || v == 2.0, "unexpected dropout output {v}");
        }
        assert!(matches!(
            {
                let mut t2 = Tape::new();
                let x2 = t2.leaf_from(&[2], vec![0.0, 0.0], false);
                t2.dropout(x2, 1.0, &mut rng)
            },
            Err(crate::Error::Range(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 3], &[0.0, 1.0, 2.0, -5.0, 0.0, 5.0], false);
        let y = tape.softmax(x).unwrap();
        let d = tape.data(y);
        for bi in 0..2 {
            let s: f32 = d[bi * 3..bi * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        assert!(d.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 4], &[0.3; 8], true);
        let loss = tape.cross_entropy(x, &[1, 3]).unwrap();
        let got = tape.scalar(loss).unwrap();
        assert!((got - (4.0f32).ln()).abs() < 1e-5, "got {got}");
    }

    #[test]
    fn cross_entropy_rejects_bad_class() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 3], &[0.0; 3], false);
        assert!(matches!(
            tape.cross_entropy(x, &[3]),
            Err(crate::Error::Range(_))
        ));
    }

    #[test]
    fn bce_half_probability_is_ln_two() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, &[3], &[0.5; 3], true);
        let loss = tape.binary_cross_entropy(p, &[0.0, 1.0, 1.0]).unwrap();
        let got = tape.scalar(loss).unwrap();
        assert!((got - std::f32::consts::LN_2).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn bce_gradient_is_zero_outside_clamp() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, &[2], &[0.0, 1.0], true);
        let loss = tape.binary_cross_entropy(p, &[1.0, 0.0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_needs_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2], &[1.0, 2.0], true);
        let y = tape.relu(x);
        assert!(matches!(
            tape.backward(y),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        // loss = sum(x * x) -> d/dx = 2x via the product rule's two paths.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], &[1.0, -2.0, 0.5], true);
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn relu_blocks_gradient_at_negative_inputs() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[4], &[-1.0, 0.0, 0.5, 2.0], true);
        let y = tape.relu(x);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn no_gradient_for_constant_leaves() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[1.0, 2.0], false);
        let w = leaf(&mut tape, &[2], &[3.0, 4.0], true);
        let y = tape.mul(x, w).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap(), &[1.0, 2.0]);
    }
}
