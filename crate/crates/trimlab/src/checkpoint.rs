//! Binary checkpoint codec for models and rewind snapshots.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   4 bytes  "TRIM"
//! version u16      1 = model, 2 = rewind snapshot
//! seed    u64      seed the model was initialized from
//! layers  u16      layer count
//! per layer:
//!   tag      u8    1 dense, 2 conv1d, 3 batchnorm, 4 relu, 5 maxpool,
//!                  6 dropout, 7 flatten, 8 output-dense
//!   dims     u32×  tag-specific:
//!                    dense        [n_out, n_in]
//!                    output-dense [n_out, n_in, activation (0/1/2)]
//!                    conv1d       [c_out, c_in, kernel, stride, dilation,
//!                                  padding, input_length]
//!                    batchnorm    [channels]
//!                    maxpool      [window]
//!                    dropout      [f32 bits of p]
//!                    relu/flatten []
//!   prunable u8
//!   kept     u32 count + count × u32 original unit indices
//!   payload  f32×  dense/conv: weight then bias
//!                  batchnorm: gamma, beta, running_mean, running_var
//! version 2 only:
//!   epoch   u32    training epochs completed when the snapshot was taken
//! ```
//!
//! The input shape is recovered from the first layer (which must therefore
//! be a weighted layer), and every structural inconsistency or truncation
//! is reported as a format error carrying the byte offset at which decoding
//! failed. Masks are runtime strategy state and are not persisted; a masked
//! model's weights are stored with their zeros in place.

use crate::error::{Error, Result};
use crate::graph::{Layer, LayerKind, ModelGraph, OutputActivation};
use crate::tensor::Tensor;
use crate::train::RewindSnapshot;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"TRIM";
pub const VERSION_MODEL: u16 = 1;
pub const VERSION_SNAPSHOT: u16 = 2;

const TAG_DENSE: u8 = 1;
const TAG_CONV1D: u8 = 2;
const TAG_BATCHNORM: u8 = 3;
const TAG_RELU: u8 = 4;
const TAG_MAXPOOL: u8 = 5;
const TAG_DROPOUT: u8 = 6;
const TAG_FLATTEN: u8 = 7;
const TAG_OUTPUT_DENSE: u8 = 8;

pub(crate) struct Writer {
    pub(crate) buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new() -> Writer {
        Writer { buf: Vec::new() }
    }
    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub(crate) fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "unexpected end of file (need {n} more bytes, {} left)",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn activation_code(a: OutputActivation) -> u32 {
    match a {
        OutputActivation::None => 0,
        OutputActivation::Softmax => 1,
        OutputActivation::Sigmoid => 2,
    }
}

/// Serializes a model (format version 1).
pub fn encode_model(model: &ModelGraph) -> Result<Vec<u8>> {
    encode(model, None)
}

/// Serializes a rewind snapshot (format version 2: model plus epoch footer).
pub fn encode_snapshot(snap: &RewindSnapshot) -> Result<Vec<u8>> {
    encode(&snap.model, Some(snap.epoch))
}

fn encode(model: &ModelGraph, epoch: Option<u32>) -> Result<Vec<u8>> {
    model.validate()?;
    match model.layers.first().map(|l| &l.kind) {
        Some(LayerKind::Dense { .. })
        | Some(LayerKind::OutputDense { .. })
        | Some(LayerKind::Conv1d { .. }) => {}
        _ => {
            return Err(Error::contract(
                "checkpoints need a weighted first layer to recover the input shape",
            ))
        }
    }
    if model.layers.len() > u16::MAX as usize {
        return Err(Error::contract("too many layers for the checkpoint format"));
    }
    let trace = model.shape_trace()?;
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u16(if epoch.is_some() {
        VERSION_SNAPSHOT
    } else {
        VERSION_MODEL
    });
    w.u64(model.seed);
    w.u16(model.layers.len() as u16);
    for (i, layer) in model.layers.iter().enumerate() {
        match &layer.kind {
            LayerKind::Dense { n_out, n_in } => {
                w.u8(TAG_DENSE);
                w.u32(*n_out as u32);
                w.u32(*n_in as u32);
            }
            LayerKind::OutputDense { n_out, n_in } => {
                w.u8(TAG_OUTPUT_DENSE);
                w.u32(*n_out as u32);
                w.u32(*n_in as u32);
                w.u32(activation_code(model.output_activation));
            }
            LayerKind::Conv1d {
                c_out,
                c_in,
                kernel,
                stride,
                dilation,
                padding,
            } => {
                w.u8(TAG_CONV1D);
                for v in [*c_out, *c_in, *kernel, *stride, *dilation, *padding, trace[i][1]] {
                    w.u32(v as u32);
                }
            }
            LayerKind::BatchNorm { channels } => {
                w.u8(TAG_BATCHNORM);
                w.u32(*channels as u32);
            }
            LayerKind::Relu => w.u8(TAG_RELU),
            LayerKind::MaxPool { window } => {
                w.u8(TAG_MAXPOOL);
                w.u32(*window as u32);
            }
            LayerKind::Dropout { p } => {
                w.u8(TAG_DROPOUT);
                w.u32(p.to_bits());
            }
            LayerKind::Flatten => w.u8(TAG_FLATTEN),
        }
        w.u8(u8::from(layer.prunable));
        match &layer.kept {
            Some(kept) => {
                w.u32(kept.len() as u32);
                for &k in kept {
                    w.u32(k);
                }
            }
            None => w.u32(0),
        }
        for t in [&layer.weight, &layer.bias, &layer.gamma, &layer.beta]
            .into_iter()
            .flatten()
        {
            w.f32s(&t.data);
        }
        if let (Some(rm), Some(rv)) = (&layer.running_mean, &layer.running_var) {
            w.f32s(rm);
            w.f32s(rv);
        }
    }
    if let Some(e) = epoch {
        w.u32(e);
    }
    Ok(w.buf)
}

/// Deserializes a version-1 model checkpoint.
pub fn decode_model(bytes: &[u8]) -> Result<ModelGraph> {
    let (model, epoch) = decode(bytes)?;
    if epoch.is_some() {
        return Err(Error::format(
            4,
            "expected a model checkpoint, found a rewind snapshot",
        ));
    }
    Ok(model)
}

/// Deserializes a version-2 rewind snapshot.
pub fn decode_snapshot(bytes: &[u8]) -> Result<RewindSnapshot> {
    let (model, epoch) = decode(bytes)?;
    match epoch {
        Some(epoch) => Ok(RewindSnapshot { model, epoch }),
        None => Err(Error::format(
            4,
            "expected a rewind snapshot, found a model checkpoint",
        )),
    }
}

fn decode(bytes: &[u8]) -> Result<(ModelGraph, Option<u32>)> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}")));
    }
    let version = r.u16()?;
    if version != VERSION_MODEL && version != VERSION_SNAPSHOT {
        return Err(Error::format(4, format!("unsupported format version {version}")));
    }
    let seed = r.u64()?;
    let n_layers = r.u16()? as usize;
    if n_layers == 0 {
        return Err(Error::format((r.pos - 2) as u64, "zero layers"));
    }
    let mut layers: Vec<Layer> = Vec::with_capacity(n_layers);
    let mut input_shape: Vec<usize> = Vec::new();
    let mut shape: Vec<usize> = Vec::new(); // running output shape
    let mut output_activation = OutputActivation::None;
    for li in 0..n_layers {
        let layer_off = r.pos as u64;
        let tag = r.u8()?;
        let bad_shape = |off: u64, msg: String| -> Error { Error::format(off, msg) };
        let kind = match tag {
            TAG_DENSE | TAG_OUTPUT_DENSE => {
                let n_out = r.u32()? as usize;
                let n_in = r.u32()? as usize;
                if tag == TAG_OUTPUT_DENSE {
                    output_activation = match r.u32()? {
                        0 => OutputActivation::None,
                        1 => OutputActivation::Softmax,
                        2 => OutputActivation::Sigmoid,
                        c => {
                            return Err(Error::format(
                                (r.pos - 4) as u64,
                                format!("unknown output activation code {c}"),
                            ))
                        }
                    };
                }
                if n_out == 0 || n_in == 0 {
                    return Err(bad_shape(layer_off, format!("layer {li}: zero dense dims")));
                }
                if li == 0 {
                    input_shape = vec![n_in];
                    shape = input_shape.clone();
                }
                if shape != [n_in] {
                    return Err(bad_shape(
                        layer_off,
                        format!("layer {li}: dense expects input {shape:?}, header says [{n_in}]"),
                    ));
                }
                shape = vec![n_out];
                if tag == TAG_DENSE {
                    LayerKind::Dense { n_out, n_in }
                } else {
                    LayerKind::OutputDense { n_out, n_in }
                }
            }
            TAG_CONV1D => {
                let mut d = [0usize; 7];
                for v in d.iter_mut() {
                    *v = r.u32()? as usize;
                }
                let [c_out, c_in, kernel, stride, dilation, padding, in_len] = d;
                if c_out == 0 || c_in == 0 {
                    return Err(bad_shape(layer_off, format!("layer {li}: zero conv dims")));
                }
                if li == 0 {
                    input_shape = vec![c_in, in_len];
                    shape = input_shape.clone();
                }
                if shape.len() != 2 || shape[0] != c_in || shape[1] != in_len {
                    return Err(bad_shape(
                        layer_off,
                        format!(
                            "layer {li}: conv1d expects input {shape:?}, header says [{c_in}, {in_len}]"
                        ),
                    ));
                }
                let l_out = crate::tensor::Tape::conv1d_out_len(
                    in_len, kernel, stride, dilation, padding,
                )
                .map_err(|e| Error::format(layer_off, format!("layer {li}: {e}")))?;
                shape = vec![c_out, l_out];
                LayerKind::Conv1d {
                    c_out,
                    c_in,
                    kernel,
                    stride,
                    dilation,
                    padding,
                }
            }
            TAG_BATCHNORM => {
                let channels = r.u32()? as usize;
                if li == 0 || shape.first() != Some(&channels) {
                    return Err(bad_shape(
                        layer_off,
                        format!("layer {li}: batchnorm over {channels} channels does not fit {shape:?}"),
                    ));
                }
                LayerKind::BatchNorm { channels }
            }
            TAG_RELU => {
                if li == 0 {
                    return Err(bad_shape(layer_off, format!("layer {li}: relu cannot come first")));
                }
                LayerKind::Relu
            }
            TAG_MAXPOOL => {
                let window = r.u32()? as usize;
                if li == 0 || shape.len() != 2 || window == 0 || window > shape[1] {
                    return Err(bad_shape(
                        layer_off,
                        format!("layer {li}: maxpool window {window} does not fit {shape:?}"),
                    ));
                }
                shape = vec![shape[0], shape[1] / window];
                LayerKind::MaxPool { window }
            }
            TAG_DROPOUT => {
                let p = f32::from_bits(r.u32()?);
                if li == 0 || !(0.0..1.0).contains(&p) {
                    return Err(bad_shape(
                        layer_off,
                        format!("layer {li}: bad dropout probability {p}"),
                    ));
                }
                LayerKind::Dropout { p }
            }
            TAG_FLATTEN => {
                if li == 0 || shape.len() != 2 {
                    return Err(bad_shape(
                        layer_off,
                        format!("layer {li}: flatten does not fit {shape:?}"),
                    ));
                }
                shape = vec![shape[0] * shape[1]];
                LayerKind::Flatten
            }
            t => return Err(Error::format(layer_off, format!("unknown layer tag {t}"))),
        };
        let prunable = match r.u8()? {
            0 => false,
            1 => true,
            v => {
                return Err(Error::format(
                    (r.pos - 1) as u64,
                    format!("bad prunable flag {v}"),
                ))
            }
        };
        let kept_off = r.pos as u64;
        let kept_n = r.u32()? as usize;
        let kept = if kept_n == 0 {
            None
        } else {
            let mut kept = Vec::with_capacity(kept_n);
            for _ in 0..kept_n {
                kept.push(r.u32()?);
            }
            if !kept.windows(2).all(|p| p[0] < p[1]) {
                return Err(Error::format(
                    kept_off,
                    format!("layer {li}: kept-unit list is not strictly increasing"),
                ));
            }
            Some(kept)
        };
        let mut layer = Layer {
            kind: kind.clone(),
            prunable,
            followed_by_batchnorm: false,
            weight: None,
            bias: None,
            gamma: None,
            beta: None,
            running_mean: None,
            running_var: None,
            kept,
        };
        match kind {
            LayerKind::Dense { n_out, n_in } | LayerKind::OutputDense { n_out, n_in } => {
                layer.weight = Some(tensor(&[n_out, n_in], r.f32s(n_out * n_in)?));
                layer.bias = Some(tensor(&[n_out], r.f32s(n_out)?));
            }
            LayerKind::Conv1d {
                c_out, c_in, kernel, ..
            } => {
                layer.weight = Some(tensor(&[c_out, c_in, kernel], r.f32s(c_out * c_in * kernel)?));
                layer.bias = Some(tensor(&[c_out], r.f32s(c_out)?));
            }
            LayerKind::BatchNorm { channels } => {
                layer.gamma = Some(tensor(&[channels], r.f32s(channels)?));
                layer.beta = Some(tensor(&[channels], r.f32s(channels)?));
                layer.running_mean = Some(r.f32s(channels)?);
                layer.running_var = Some(r.f32s(channels)?);
            }
            _ => {}
        }
        layers.push(layer);
    }
    let epoch = if version == VERSION_SNAPSHOT {
        Some(r.u32()?)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes after checkpoint", bytes.len() - r.pos),
        ));
    }
    if !matches!(
        layers.last().map(|l| &l.kind),
        Some(LayerKind::OutputDense { .. })
    ) {
        return Err(Error::format(
            bytes.len() as u64,
            "checkpoint does not end with an output layer",
        ));
    }
    for i in 0..layers.len() - 1 {
        if matches!(layers[i + 1].kind, LayerKind::BatchNorm { .. }) {
            layers[i].followed_by_batchnorm = true;
        }
    }
    let model = ModelGraph {
        layers,
        input_shape,
        output_activation,
        seed,
        mask: None,
    };
    model
        .validate()
        .map_err(|e| Error::format(bytes.len() as u64, format!("inconsistent checkpoint: {e}")))?;
    Ok((model, epoch))
}

fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
    let mut t = Tensor::new(shape, data).expect("sizes computed from shape");
    t.requires_grad = true;
    t
}

/// Bytes a model occupies on disk in this format.
pub fn disk_size(model: &ModelGraph) -> Result<u64> {
    Ok(encode_model(model)?.len() as u64)
}

/// The four resource axes a deployment cares about, all for one model as
/// stored: parameters carried in its buffers, serialized size, single-input
/// inference FLOPs, and peak inference memory. A runtime mask shrinks none
/// of these — zeroed weights are still stored, loaded, and multiplied; only
/// physically trimming units does. Every field is strictly positive for a
/// non-empty model, and none of them grows when a unit is removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub params: u64,
    pub disk_bytes: u64,
    pub flops: u64,
    pub memory_bytes: u64,
}

pub fn cost_report(model: &ModelGraph) -> Result<CostReport> {
    Ok(CostReport {
        params: model.count_params(),
        disk_bytes: disk_size(model)?,
        flops: model.count_flops()?,
        memory_bytes: model.estimate_memory(1)?,
    })
}

impl std::fmt::Display for CostReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "parameters   {:>12}", self.params)?;
        writeln!(f, "disk bytes   {:>12}", self.disk_bytes)?;
        writeln!(f, "flops        {:>12}", self.flops)?;
        write!(f, "memory bytes {:>12}", self.memory_bytes)
    }
}

pub fn save_model(model: &ModelGraph, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    decode_model(&std::fs::read(path)?)
}

pub fn save_snapshot(snap: &RewindSnapshot, path: &Path) -> Result<()> {
    std::fs::write(path, encode_snapshot(snap)?)?;
    Ok(())
}

pub fn load_snapshot(path: &Path) -> Result<RewindSnapshot> {
    decode_snapshot(&std::fs::read(path)?)
}
