//! `FIDOEMB1` embedding blobs.
//!
//! Layout (little-endian): 8-byte magic, then `version`, `T`, `d`,
//! `dtype_code` as `u32`, then `T·d` `f32` values in row-major order.

use std::path::Path;

use crate::dsp::{Domain, FeatureTensor};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const EMB_MAGIC: &[u8; 8] = b"FIDOEMB1";
pub const EMB_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
const HEADER_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingHeader {
    pub version: u32,
    pub frames: u32,
    pub dim: u32,
    pub dtype_code: u32,
}

impl EmbeddingHeader {
    pub fn payload_len(&self) -> usize {
        self.frames as usize * self.dim as usize * 4
    }
}

/// A loaded embedding plus a note when its frame count is off the expected
/// grid. Alignment is enforced later, where the domains are joined.
#[derive(Clone, Debug)]
pub struct LoadedEmbedding<S> {
    pub features: FeatureTensor<S>,
    pub warning: Option<String>,
}

pub fn encode_embedding<S: Scalar>(t: &Tensor<S>) -> Result<Vec<u8>> {
    let (frames, dim) = t.dims2()?;
    let mut out = Vec::with_capacity(HEADER_LEN + t.len() * 4);
    out.extend_from_slice(EMB_MAGIC);
    for v in [EMB_VERSION, frames as u32, dim as u32, DTYPE_F32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    Ok(out)
}

pub fn write_embedding<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    std::fs::write(path, encode_embedding(t)?).map_err(|e| Error::io(path, e))
}

pub fn parse_header(path: &Path, bytes: &[u8]) -> Result<EmbeddingHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            path,
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[..8] != EMB_MAGIC {
        return Err(Error::format(path, "bad magic (expected FIDOEMB1)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let h = EmbeddingHeader {
        version: word(0),
        frames: word(1),
        dim: word(2),
        dtype_code: word(3),
    };
    if h.version != EMB_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", h.version)));
    }
    if h.dtype_code != DTYPE_F32 {
        return Err(Error::format(path, format!("unsupported dtype code {}", h.dtype_code)));
    }
    Ok(h)
}

pub fn read_header(path: &Path) -> Result<EmbeddingHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(path, &bytes)
}

pub fn decode_embedding<S: Scalar>(path: &Path, bytes: &[u8]) -> Result<Tensor<S>> {
    let h = parse_header(path, bytes)?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != h.payload_len() {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, expected {} (T={} d={})",
                payload.len(),
                h.payload_len(),
                h.frames,
                h.dim
            ),
        ));
    }
    let data: Vec<S> = payload
        .chunks_exact(4)
        .map(|c| S::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Tensor::new(vec![h.frames as usize, h.dim as usize], data).map_err(|_| Error::format(path, "non-finite value in payload"))
}

/// Reads an embedding file; `expected_frames` only produces a warning.
pub fn load_embedding<S: Scalar>(path: &Path, expected_frames: Option<usize>) -> Result<LoadedEmbedding<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let data = decode_embedding(path, &bytes)?;
    let warning = match expected_frames {
        Some(t) if t != data.rows() => Some(format!(
            "{}: {} frames, expected {t}; alignment will fail downstream",
            path.display(),
            data.rows()
        )),
        _ => None,
    };
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(LoadedEmbedding {
        features: FeatureTensor {
            domain: Domain::Ws,
            data,
        },
        warning,
    })
}
