//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SLSMIL01" (8 bytes)
//! format version   u32
//! input H, W, C    u32 each
//! layer count      u32
//! per layer:
//!   kind tag       u8   (1 = conv, 2 = dense)
//!   conv dims      out_c, in_c, kernel, stride, pad   (u32 each)
//!   dense dims     out, in                            (u32 each)
//!   weights        f64 row-major, then biases
//! optimizer flag   u8   (0 = absent, 1 = present)
//!   step u64, learning_rate/beta1/beta2/epsilon f64,
//!   first moments, second moments (f64 x param count)
//! crc32 of all preceding bytes, u32
//! ```
//!
//! Writes go to a temp file and are renamed into place, so a reader
//! never sees a partial checkpoint.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::adam::OptimizerState;
use super::model::{Geometry, LayerSpec, ScorerModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SLSMIL01";
const FORMAT_VERSION: u32 = 1;

const TAG_CONV: u8 = 1;
const TAG_DENSE: u8 = 2;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o failed: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("checkpoint shape inconsistency: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint payload corrupt: crc mismatch")]
    Corrupt,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::IoFailure(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "checkpoint truncated",
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode(model: &ScorerModel, optimizer: Option<&OptimizerState>) -> Vec<u8> {
    let geo = model.input_geometry();
    let specs = model.layer_specs();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(geo.height as u32).to_le_bytes());
    out.extend_from_slice(&(geo.width as u32).to_le_bytes());
    out.extend_from_slice(&(geo.channels as u32).to_le_bytes());
    out.extend_from_slice(&(specs.len() as u32).to_le_bytes());
    // weights and biases come straight from the flat buffer; layers are
    // stored in order, weights before biases, as laid out by the model
    let mut cursor = 0usize;
    let mut shape = (geo.channels, geo.height, geo.width);
    for spec in &specs {
        match *spec {
            LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                out.push(TAG_CONV);
                for d in [out_channels, shape.0, kernel, stride, pad] {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                let w_len = out_channels * shape.0 * kernel * kernel;
                push_f64s(&mut out, &model.params()[cursor..cursor + w_len + out_channels]);
                cursor += w_len + out_channels;
                let oh = (shape.1 + 2 * pad - kernel) / stride + 1;
                let ow = (shape.2 + 2 * pad - kernel) / stride + 1;
                shape = (out_channels, oh, ow);
            }
            LayerSpec::Dense { width } => {
                out.push(TAG_DENSE);
                let in_len = shape.0 * shape.1 * shape.2;
                for d in [width, in_len] {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                push_f64s(&mut out, &model.params()[cursor..cursor + width * in_len + width]);
                cursor += width * in_len + width;
                shape = (width, 1, 1);
            }
        }
    }
    debug_assert_eq!(cursor, model.param_count());
    match optimizer {
        Some(opt) => {
            out.push(1);
            out.extend_from_slice(&opt.step.to_le_bytes());
            for v in [opt.learning_rate, opt.beta1, opt.beta2, opt.epsilon] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            push_f64s(&mut out, &opt.m);
            push_f64s(&mut out, &opt.v);
        }
        None => out.push(0),
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Serialize model (and optionally optimizer state) atomically: the
/// bytes land in a sibling temp file first and are renamed into place.
pub fn save_checkpoint(
    model: &ScorerModel,
    optimizer: Option<&OptimizerState>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let bytes = encode(model, optimizer);
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let tmp_path = path.with_file_name(format!(".{file_name}.{}.tmp", std::process::id()));
    {
        let mut tmp = std::fs::File::create(&tmp_path)?;
        tmp.write_all(&bytes)?;
        tmp.flush()?;
    }
    match std::fs::rename(&tmp_path, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp_path);
            Err(CheckpointError::IoFailure(e))
        }
    }
}

/// Load a checkpoint written by [`save_checkpoint`]. Every weight comes
/// back bit-for-bit; a damaged or truncated file never yields a partial
/// model.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(ScorerModel, Option<OptimizerState>), CheckpointError> {
    let buf = std::fs::read(path)?;
    if buf.len() < CHECKPOINT_MAGIC.len() || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if buf.len() < 12 {
        return Err(CheckpointError::BadMagic);
    }
    let payload_len = buf.len() - 4;
    let stored_crc = u32::from_le_bytes(buf[payload_len..].try_into().unwrap());
    if crc32fast::hash(&buf[..payload_len]) != stored_crc {
        return Err(CheckpointError::Corrupt);
    }
    let mut r = Reader { buf: &buf[..payload_len], pos: 8 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let layer_count = r.u32()? as usize;
    let geo = Geometry { height, width, channels };
    let mut specs = Vec::with_capacity(layer_count);
    let mut params: Vec<f64> = Vec::new();
    let mut shape = (channels, height, width);
    for li in 0..layer_count {
        match r.u8()? {
            TAG_CONV => {
                let out_c = r.u32()? as usize;
                let in_c = r.u32()? as usize;
                let kernel = r.u32()? as usize;
                let stride = r.u32()? as usize;
                let pad = r.u32()? as usize;
                if in_c != shape.0 {
                    return Err(CheckpointError::ShapeMismatch(format!(
                        "layer {li}: conv expects {in_c} input channels, pipeline provides {}",
                        shape.0
                    )));
                }
                if stride == 0 || kernel == 0 || shape.1 + 2 * pad < kernel {
                    return Err(CheckpointError::ShapeMismatch(format!(
                        "layer {li}: degenerate conv dims"
                    )));
                }
                let w_len = out_c * in_c * kernel * kernel;
                params.extend(r.f64_vec(w_len + out_c)?);
                let oh = (shape.1 + 2 * pad - kernel) / stride + 1;
                let ow = (shape.2 + 2 * pad - kernel) / stride + 1;
                shape = (out_c, oh, ow);
                specs.push(LayerSpec::Conv { out_channels: out_c, kernel, stride, pad });
            }
            TAG_DENSE => {
                let out = r.u32()? as usize;
                let in_len = r.u32()? as usize;
                if in_len != shape.0 * shape.1 * shape.2 {
                    return Err(CheckpointError::ShapeMismatch(format!(
                        "layer {li}: dense expects {in_len} inputs, pipeline provides {}",
                        shape.0 * shape.1 * shape.2
                    )));
                }
                params.extend(r.f64_vec(out * in_len + out)?);
                shape = (out, 1, 1);
                specs.push(LayerSpec::Dense { width: out });
            }
            tag => {
                return Err(CheckpointError::ShapeMismatch(format!(
                    "layer {li}: unknown layer tag {tag}"
                )))
            }
        }
    }
    let model =
        ScorerModel::from_parts(geo, &specs, params).map_err(CheckpointError::ShapeMismatch)?;
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let learning_rate = r.f64()?;
            let beta1 = r.f64()?;
            let beta2 = r.f64()?;
            let epsilon = r.f64()?;
            let m = r.f64_vec(model.param_count())?;
            let v = r.f64_vec(model.param_count())?;
            Some(OptimizerState { m, v, step, learning_rate, beta1, beta2, epsilon })
        }
        flag => {
            return Err(CheckpointError::ShapeMismatch(format!("bad optimizer flag {flag}")))
        }
    };
    Ok((model, optimizer))
}
