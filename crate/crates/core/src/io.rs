//! Portable artifact formats: the TZT1 tensor container and 16-bit PGM
//! image export.
//!
//! A TZT1 file is the 4-byte magic `TZT1`, a little-endian u32 header
//! length, a UTF-8 JSON header `{dtype, shape, order, meta}` and the raw
//! little-endian payload. Round trips are bit-exact for both f32 and f64
//! payloads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TZT1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Tzt1Header {
    dtype: String,
    shape: Vec<usize>,
    order: String,
    #[serde(default)]
    meta: Value,
}

/// A loaded tensor of either supported payload type.
#[derive(Clone, Debug)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Widen to f64 regardless of stored precision.
    pub fn into_f64(self) -> Tensor<f64> {
        match self {
            AnyTensor::F32(t) => t.to_f64(),
            AnyTensor::F64(t) => t,
        }
    }

    pub fn expect_f64(self, what: &str) -> Result<Tensor<f64>> {
        match self {
            AnyTensor::F64(t) => Ok(t),
            AnyTensor::F32(_) => Err(Error::invalid(
                "load_tzt1",
                format!("{what}: expected f64 payload, found f32"),
            )),
        }
    }
}

fn write_container(
    path: &Path,
    dtype: &str,
    shape: &[usize],
    meta: &Value,
    payload: &[u8],
) -> Result<()> {
    let header = Tzt1Header {
        dtype: dtype.to_string(),
        shape: shape.to_vec(),
        order: "row-major".to_string(),
        meta: meta.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Save an f64 tensor with an arbitrary JSON metadata object.
pub fn save_tzt1_f64(path: &Path, tensor: &Tensor<f64>, meta: &Value) -> Result<()> {
    let mut payload = Vec::with_capacity(tensor.numel() * 8);
    for &v in tensor.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_container(path, "f64", tensor.shape(), meta, &payload)
}

/// Save an f32 tensor with an arbitrary JSON metadata object.
pub fn save_tzt1_f32(path: &Path, tensor: &Tensor<f32>, meta: &Value) -> Result<()> {
    let mut payload = Vec::with_capacity(tensor.numel() * 4);
    for &v in tensor.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_container(path, "f32", tensor.shape(), meta, &payload)
}

/// Load any TZT1 file, returning the tensor and its metadata object.
pub fn load_tzt1(path: &Path) -> Result<(AnyTensor, Value)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::invalid(
            "load_tzt1",
            format!("{}: bad magic {magic:?}", path.display()),
        ));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Tzt1Header = serde_json::from_slice(&header_bytes)?;
    if header.order != "row-major" {
        return Err(Error::invalid(
            "load_tzt1",
            format!("unsupported order {:?}", header.order),
        ));
    }
    let numel: usize = header.shape.iter().product();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let tensor = match header.dtype.as_str() {
        "f64" => {
            if payload.len() != numel * 8 {
                return Err(Error::invalid(
                    "load_tzt1",
                    format!(
                        "payload is {} bytes, expected {} for shape {:?}",
                        payload.len(),
                        numel * 8,
                        header.shape
                    ),
                ));
            }
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            AnyTensor::F64(Tensor::new(header.shape, data)?)
        }
        "f32" => {
            if payload.len() != numel * 4 {
                return Err(Error::invalid(
                    "load_tzt1",
                    format!(
                        "payload is {} bytes, expected {} for shape {:?}",
                        payload.len(),
                        numel * 4,
                        header.shape
                    ),
                ));
            }
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            AnyTensor::F32(Tensor::new(header.shape, data)?)
        }
        other => {
            return Err(Error::invalid(
                "load_tzt1",
                format!("unsupported dtype {other:?}"),
            ))
        }
    };
    Ok((tensor, header.meta))
}

/// Export a [1, H, W] unit-range image as a 16-bit binary PGM (P5,
/// big-endian samples, value = round(x * 65535)).
pub fn export_pgm(image: &Tensor<f64>, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::invalid(
            "export_pgm",
            format!("expected [1, H, W], got {s:?}"),
        ));
    }
    for &v in image.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(
                "export_pgm",
                format!("value {v} outside [0, 1]; normalize before export"),
            ));
        }
    }
    let (h, w) = (s[1], s[2]);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n65535\n")?;
    for &v in image.data() {
        let q = (v * 65535.0).round() as u16;
        out.write_all(&q.to_be_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Read back a 16-bit P5 PGM as a [1, H, W] unit-range tensor.
pub fn load_pgm(path: &Path) -> Result<Tensor<f64>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    // header: three whitespace-separated tokens after "P5", then one
    // whitespace byte before the payload
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::invalid("load_pgm", "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P5" {
        return Err(Error::invalid("load_pgm", "not a binary PGM"));
    }
    let w: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::invalid("load_pgm", "bad width"))?;
    let h: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::invalid("load_pgm", "bad height"))?;
    let maxval: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::invalid("load_pgm", "bad maxval"))?;
    if maxval != 65535 {
        return Err(Error::invalid(
            "load_pgm",
            format!("expected 16-bit PGM, maxval {maxval}"),
        ));
    }
    pos += 1; // the single whitespace separating header and payload
    let payload = &bytes[pos..];
    if payload.len() != h * w * 2 {
        return Err(Error::invalid(
            "load_pgm",
            format!("payload {} bytes, expected {}", payload.len(), h * w * 2),
        ));
    }
    let data: Vec<f64> = payload
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
        .collect();
    Tensor::new(vec![1, h, w], data)
}
