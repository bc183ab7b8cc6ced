//! Durable snapshots of a training run.
//!
//! A checkpoint records the model configuration, the step counter, every
//! parameter tensor by name and shape, and (optionally) the full optimizer
//! state, all guarded by a CRC32 trailer. Numeric payloads are
//! little-endian; tensor data and optimizer moments are stored as `f64`,
//! which represents both supported parameter widths exactly, so a
//! save/load cycle is bit-for-bit lossless.
//!
//! Layout:
//!
//! ```text
//! magic       b"CMBA"
//! version     u32
//! cfg_len     u32, then cfg_len bytes of model-config JSON
//! precision   u8 (1 = single, 2 = double)
//! step        u64
//! n_tensors   u32
//! per tensor: name_len u32, name utf-8, ndim u32, dims u32×ndim,
//!             data f64×prod(dims)
//! opt tag     u8 (0 = none, 1 = adamw)
//! if adamw:   opt_cfg_len u32 + JSON, t u64, n u64, m f64×n, v f64×n
//! crc32       u32 over all preceding bytes
//! ```

use std::fs;
use std::path::Path;
use std::sync::Arc;

use comba_core::model::{Layout, ModelConfig, ModelParams};
use comba_core::tasks::{AdamW, OptimConfig};
use comba_core::{KernelError, Real, Result};

const MAGIC: &[u8; 4] = b"CMBA";
const VERSION: u32 = 1;

const PRECISION_SINGLE: u8 = 1;
const PRECISION_DOUBLE: u8 = 2;

/// A fully loaded checkpoint.
pub struct Checkpoint<T: Real> {
    pub model: ModelConfig,
    pub step: u64,
    pub params: ModelParams<T>,
    pub opt: Option<AdamW>,
}

/// Header fields readable without committing to a parameter precision.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub model: ModelConfig,
    pub precision_name: &'static str,
    pub step: u64,
}

fn format(detail: impl Into<String>) -> KernelError {
    KernelError::format("checkpoint", detail)
}

fn precision_tag(name: &str) -> Result<u8> {
    match name {
        "single" => Ok(PRECISION_SINGLE),
        "double" => Ok(PRECISION_DOUBLE),
        other => Err(format(format!("unknown precision {other:?}"))),
    }
}

fn precision_name(tag: u8) -> Result<&'static str> {
    match tag {
        PRECISION_SINGLE => Ok("single"),
        PRECISION_DOUBLE => Ok("double"),
        other => Err(format(format!("unknown precision tag {other}"))),
    }
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s<'a>(buf: &mut Vec<u8>, xs: impl Iterator<Item = &'a f64>) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serialize a checkpoint to bytes.
pub fn encode<T: Real>(
    model: &ModelConfig,
    step: u64,
    params: &ModelParams<T>,
    opt: Option<&AdamW>,
) -> Result<Vec<u8>> {
    let layout = params.layout();
    let cfg_json = serde_json::to_vec(model)
        .map_err(|e| format(format!("model config does not serialize: {e}")))?;

    let mut buf = Vec::with_capacity(64 + cfg_json.len() + 8 * layout.total_len());
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    push_u32(&mut buf, cfg_json.len() as u32);
    buf.extend_from_slice(&cfg_json);
    buf.push(precision_tag(T::PRECISION_NAME)?);
    push_u64(&mut buf, step);

    push_u32(&mut buf, layout.entries().len() as u32);
    for entry in layout.entries() {
        push_u32(&mut buf, entry.name.len() as u32);
        buf.extend_from_slice(entry.name.as_bytes());
        push_u32(&mut buf, entry.shape.len() as u32);
        for &d in &entry.shape {
            push_u32(&mut buf, d as u32);
        }
        for x in &params.data()[entry.range()] {
            buf.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }

    match opt {
        None => buf.push(0),
        Some(opt) => {
            buf.push(1);
            let opt_json = serde_json::to_vec(&opt.cfg)
                .map_err(|e| format(format!("optimizer config does not serialize: {e}")))?;
            push_u32(&mut buf, opt_json.len() as u32);
            buf.extend_from_slice(&opt_json);
            push_u64(&mut buf, opt.t);
            push_u64(&mut buf, opt.m.len() as u64);
            push_f64s(&mut buf, opt.m.iter());
            push_f64s(&mut buf, opt.v.iter());
        }
    }

    let crc = crc32fast::hash(&buf);
    push_u32(&mut buf, crc);
    Ok(buf)
}

/// Byte-slice reader that tracks its position and fails loudly at EOF.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(format(format!(
                "truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Split off and verify the CRC trailer, returning the protected payload,
/// and parse the header up to (but not past) the step counter.
fn parse_header<'a>(bytes: &'a [u8]) -> Result<(Reader<'a>, ModelConfig, u8, u64)> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(format("file too short to be a checkpoint"));
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(format(format!("checksum mismatch: stored {stored:#010x}, computed {actual:#010x}")));
    }
    let mut r = Reader { bytes: payload, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(format("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format(format!("unsupported version {version} (expected {VERSION})")));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_bytes = r.take(cfg_len)?;
    let model: ModelConfig = serde_json::from_slice(cfg_bytes)
        .map_err(|e| format(format!("model config does not parse: {e}")))?;
    model.validate()?;
    let precision = r.u8()?;
    precision_name(precision)?;
    let step = r.u64()?;
    Ok((r, model, precision, step))
}

/// Read configuration, precision, and step without loading tensors.
pub fn decode_info(bytes: &[u8]) -> Result<CheckpointInfo> {
    let (_, model, precision, step) = parse_header(bytes)?;
    Ok(CheckpointInfo { model, precision_name: precision_name(precision)?, step })
}

/// Deserialize a checkpoint. The stored precision must match `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (mut r, model, precision, step) = parse_header(bytes)?;
    let want = precision_tag(T::PRECISION_NAME)?;
    if precision != want {
        return Err(format(format!(
            "precision mismatch: checkpoint holds {}, caller wants {}",
            precision_name(precision)?,
            T::PRECISION_NAME
        )));
    }

    let layout = Arc::new(Layout::for_config(&model));
    let n_tensors = r.u32()? as usize;
    if n_tensors != layout.entries().len() {
        return Err(format(format!(
            "tensor count {} does not match the configuration's {}",
            n_tensors,
            layout.entries().len()
        )));
    }
    let mut data = vec![T::zero(); layout.total_len()];
    let mut seen = vec![false; n_tensors];
    for _ in 0..n_tensors {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| format("tensor name is not utf-8"))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let entry = layout.entry(&name)?.clone();
        if entry.shape != shape {
            return Err(format(format!(
                "tensor {name:?} has shape {shape:?}, expected {:?}",
                entry.shape
            )));
        }
        let index = layout
            .entries()
            .iter()
            .position(|e| e.name == name)
            .expect("entry() succeeded, so the name exists");
        if seen[index] {
            return Err(format(format!("tensor {name:?} appears twice")));
        }
        seen[index] = true;
        let values = r.f64s(entry.len())?;
        for (dst, v) in data[entry.range()].iter_mut().zip(values) {
            *dst = T::from_f64(v);
        }
    }

    let opt = match r.u8()? {
        0 => None,
        1 => {
            let opt_len = r.u32()? as usize;
            let cfg: OptimConfig = serde_json::from_slice(r.take(opt_len)?)
                .map_err(|e| format(format!("optimizer config does not parse: {e}")))?;
            cfg.validate()?;
            let t = r.u64()?;
            let n = r.u64()? as usize;
            if n != layout.total_len() {
                return Err(format(format!(
                    "optimizer holds {n} moments for {} parameters",
                    layout.total_len()
                )));
            }
            let m = r.f64s(n)?;
            let v = r.f64s(n)?;
            Some(AdamW { cfg, t, m, v })
        }
        other => return Err(format(format!("unknown optimizer tag {other}"))),
    };

    if !r.done() {
        return Err(format(format!("{} trailing bytes", r.bytes.len() - r.pos)));
    }

    let params = ModelParams::from_layout_data(layout, data)?;
    Ok(Checkpoint { model, step, params, opt })
}

/// Write a checkpoint atomically: serialize, write to a sibling temp file,
/// then rename over the destination.
pub fn save<T: Real>(
    path: &Path,
    model: &ModelConfig,
    step: u64,
    params: &ModelParams<T>,
    opt: Option<&AdamW>,
) -> Result<()> {
    let bytes = encode(model, step, params, opt)?;
    let io = |e| KernelError::io(format!("checkpoint write {}", path.display()), e);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path)
        .map_err(|e| KernelError::io(format!("checkpoint read {}", path.display()), e))?;
    decode(&bytes)
}

pub fn load_info(path: &Path) -> Result<CheckpointInfo> {
    let bytes = fs::read(path)
        .map_err(|e| KernelError::io(format!("checkpoint read {}", path.display()), e))?;
    decode_info(&bytes)
}
