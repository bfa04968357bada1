//! Tensor file format: one JSON header line, then raw little-endian f32.
//!
//! ```text
//! {"dtype":"f32","shape":[2,3],"layout":"row-major","byte_order":"little"}\n
//! <24 bytes>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("malformed tensor header: {0}")]
    MalformedHeader(String),
    #[error("truncated tensor payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("tensor payload size mismatch: shape {shape:?} expects {expected} bytes, found {actual}")]
    SizeMismatch { shape: Vec<usize>, expected: usize, actual: usize },
    #[error("tensor I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    layout: String,
    byte_order: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::SizeMismatch { expected: 4 * n, actual: 4 * data.len(), shape });
        }
        Ok(Self { shape, data })
    }

    /// Packs rows of equal length into an `[n, d]` tensor.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, TensorError> {
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != d) {
            return Err(TensorError::MalformedHeader("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().map(|&v| v as f32)).collect();
        Self::new(vec![rows.len(), d], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Rows of a 2-d tensor, widened to f64.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        let d = match self.shape.as_slice() {
            [_, d] => *d,
            _ => self.data.len(),
        };
        if d == 0 {
            return vec![Vec::new(); self.shape.first().copied().unwrap_or(0)];
        }
        self.data.chunks(d).map(|c| c.iter().map(|&v| f64::from(v)).collect()).collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), TensorError> {
        let header = Header {
            dtype: "f32".into(),
            shape: self.shape.clone(),
            layout: "row-major".into(),
            byte_order: "little".into(),
        };
        let line = serde_json::to_string(&header).expect("header serializes");
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(4 * self.data.len());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, TensorError> {
        let mut r = BufReader::new(r);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(TensorError::MalformedHeader("missing header terminator".into()));
        }
        line.pop();
        let header: Header = serde_json::from_slice(&line).map_err(|e| TensorError::MalformedHeader(e.to_string()))?;
        if header.dtype != "f32" || header.layout != "row-major" || header.byte_order != "little" {
            return Err(TensorError::MalformedHeader(format!(
                "unsupported encoding {}/{}/{}",
                header.dtype, header.layout, header.byte_order
            )));
        }
        let expected = header
            .shape
            .iter()
            .try_fold(4usize, |acc, &s| acc.checked_mul(s))
            .ok_or_else(|| TensorError::MalformedHeader("shape overflows".into()))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() < expected {
            return Err(TensorError::Truncated { expected, actual: payload.len() });
        }
        if payload.len() != expected {
            return Err(TensorError::SizeMismatch { shape: header.shape, expected, actual: payload.len() });
        }
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        Ok(Self { shape: header.shape, data })
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        Self::read_from(fs::File::open(path)?)
    }
}
