//! Binary on-disk cache for generated datasets.
//!
//! Generating the onset task in particular costs real time (track synthesis
//! plus FFT analysis), so sweeps cache datasets keyed by task and seed.
//! The format is little-endian and versioned; any mismatch between the
//! requested task/seed/size and the cached header regenerates instead of
//! trusting a stale file. Caching is an optimization only: a cached load is
//! bitwise-identical to regeneration.

use super::{Dataset, LossKind, Metric, Split, Target, TaskKind};
use crate::checkpoint::{Reader, Writer};
use crate::error::{Error, Result};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TDSC";
const VERSION: u16 = 1;

fn kind_tag(kind: TaskKind) -> u8 {
    match kind {
        TaskKind::AudioClass => 1,
        TaskKind::Pitch => 2,
        TaskKind::Onset => 3,
    }
}

fn kind_from_tag(tag: u8, offset: u64) -> Result<TaskKind> {
    match tag {
        1 => Ok(TaskKind::AudioClass),
        2 => Ok(TaskKind::Pitch),
        3 => Ok(TaskKind::Onset),
        other => Err(Error::format(offset, format!("unknown task tag {other}"))),
    }
}

fn encode_split(w: &mut Writer, split: &Split) {
    w.u64(split.n as u64);
    w.u64(split.sample_len as u64);
    for t in &split.targets {
        match t {
            Target::Class(c) => {
                w.u8(1);
                w.u32(*c);
            }
            Target::Binary(v) => {
                w.u8(2);
                w.f32s(&[*v]);
            }
        }
    }
    w.u64(split.spans.len() as u64);
    for &(a, b) in &split.spans {
        w.u64(a as u64);
        w.u64(b as u64);
    }
    w.f32s(&split.data);
}

fn decode_split(r: &mut Reader) -> Result<Split> {
    let n = r.u64()? as usize;
    let sample_len = r.u64()? as usize;
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.pos as u64;
        let target = match r.u8()? {
            1 => Target::Class(r.u32()?),
            2 => Target::Binary(r.f32s(1)?[0]),
            other => {
                return Err(Error::format(at, format!("unknown target tag {other}")));
            }
        };
        targets.push(target);
    }
    let n_spans = r.u64()? as usize;
    let mut spans = Vec::with_capacity(n_spans);
    for _ in 0..n_spans {
        let a = r.u64()? as usize;
        let b = r.u64()? as usize;
        spans.push((a, b));
    }
    let data = r.f32s(n * sample_len)?;
    let split = Split {
        n,
        sample_len,
        data,
        targets,
        spans,
    };
    split.check()?;
    Ok(split)
}

/// Serializes a dataset to the cache format.
pub fn encode(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.u8(kind_tag(ds.kind));
    w.u64(ds.seed);
    w.u16(ds.input_shape.len() as u16);
    for &d in &ds.input_shape {
        w.u32(d as u32);
    }
    w.u32(ds.arity as u32);
    w.u8(match ds.loss {
        LossKind::CrossEntropy => 1,
        LossKind::Binary => 2,
    });
    w.u8(match ds.metric {
        Metric::ClassError => 1,
        Metric::OnsetError => 2,
    });
    for split in [&ds.train, &ds.val, &ds.test] {
        encode_split(&mut w, split);
    }
    w.buf
}

/// Decodes a dataset from the cache format, validating structure as it goes.
pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::format(0, "not a dataset cache file (bad magic)"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format(
            4,
            format!("unsupported cache version {version} (expected {VERSION})"),
        ));
    }
    let kind = kind_from_tag(r.u8()?, 6)?;
    let seed = r.u64()?;
    let rank = r.u16()? as usize;
    let mut input_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input_shape.push(r.u32()? as usize);
    }
    let arity = r.u32()? as usize;
    let at = r.pos as u64;
    let loss = match r.u8()? {
        1 => LossKind::CrossEntropy,
        2 => LossKind::Binary,
        other => return Err(Error::format(at, format!("unknown loss tag {other}"))),
    };
    let at = r.pos as u64;
    let metric = match r.u8()? {
        1 => Metric::ClassError,
        2 => Metric::OnsetError,
        other => return Err(Error::format(at, format!("unknown metric tag {other}"))),
    };
    let train = decode_split(&mut r)?;
    let val = decode_split(&mut r)?;
    let test = decode_split(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes after dataset", bytes.len() - r.pos),
        ));
    }
    let ds = Dataset {
        kind,
        seed,
        input_shape,
        arity,
        loss,
        metric,
        train,
        val,
        test,
    };
    ds.check()?;
    Ok(ds)
}

/// Writes a dataset to `path` (creating parent directories).
pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode(ds))?;
    Ok(())
}

/// Reads a dataset from `path`.
pub fn load(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

/// Loads the dataset for (`kind`, `size`, `seed`) from `dir` if a valid
/// cache file exists, else generates it and writes the cache. A cache file
/// whose header disagrees with the request — or that fails to decode — is
/// regenerated and overwritten.
pub fn load_or_generate(
    dir: &Path,
    kind: TaskKind,
    size: Option<usize>,
    seed: u64,
) -> Result<Dataset> {
    let size_token = size.map_or("default".to_string(), |s| s.to_string());
    let path = dir.join(format!("{}-s{}-n{}.dat", kind.name(), seed, size_token));
    if path.exists() {
        if let Ok(ds) = load(&path) {
            if ds.kind == kind && ds.seed == seed {
                return Ok(ds);
            }
        }
    }
    let ds = super::generate(kind, size, seed)?;
    save(&ds, &path)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_pitch() -> Dataset {
        super::super::pitch::generate(40, 7).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise_identical() {
        let ds = small_pitch();
        let bytes = encode(&ds);
        let back = decode(&bytes).unwrap();
        assert_eq!(ds, back);
        assert_eq!(bytes, encode(&back));
    }

    #[test]
    fn roundtrip_preserves_spans_and_binary_targets() {
        let ds = super::super::onset::generate(6, 3).unwrap();
        let back = decode(&encode(&ds)).unwrap();
        assert_eq!(ds, back);
        assert_eq!(back.val.spans, ds.val.spans);
    }

    #[test]
    fn bad_magic_is_rejected_at_offset_zero() {
        let mut bytes = encode(&small_pitch());
        bytes[0] = b'X';
        match decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = encode(&small_pitch());
        for cut in [3, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut} decoded");
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode(&small_pitch());
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn load_or_generate_hits_cache_bitwise() {
        let dir = std::env::temp_dir().join(format!("trimlab-cache-test-{}", std::process::id()));
        let fresh = load_or_generate(&dir, TaskKind::Pitch, Some(40), 7).unwrap();
        let cached = load_or_generate(&dir, TaskKind::Pitch, Some(40), 7).unwrap();
        assert_eq!(fresh, cached);
        assert_eq!(fresh, small_pitch());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_cache_is_regenerated() {
        let dir = std::env::temp_dir().join(format!("trimlab-cache-corrupt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pitch-s7-n40.dat");
        std::fs::write(&path, b"garbage").unwrap();
        let ds = load_or_generate(&dir, TaskKind::Pitch, Some(40), 7).unwrap();
        assert_eq!(ds, small_pitch());
        // The corrupt file was replaced by a valid one.
        assert!(load(&path).is_ok());
        std::fs::remove_dir_all(&dir).ok();
    }
}
