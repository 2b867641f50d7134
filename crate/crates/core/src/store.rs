//! Versioned on-disk stores.
//!
//! Two binary container formats, both little-endian with explicit magic and
//! version fields:
//!
//! * tensor store — fixed-shape f32 records (feature vectors, EEG
//!   images/movies), row-major;
//! * model store — a kind tag plus named f64 matrices (fitted transforms
//!   and classifier parameter blobs), row-major.
//!
//! Plus a P6 portable-pixmap (PPM) exporter for visual inspection of EEG
//! images.

use crate::topomap::EegImage;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const TENSOR_MAGIC: &[u8; 8] = b"EEGTENS\0";
pub const MODEL_MAGIC: &[u8; 8] = b"EEGMODL\0";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static [u8; 8] },
    #[error("unsupported store version {0}")]
    BadVersion(u32),
    #[error("malformed store: {0}")]
    Malformed(String),
    #[error("record {index} has {got} values, shape requires {expected}")]
    RecordShape {
        index: usize,
        got: usize,
        expected: usize,
    },
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N], StoreError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32, StoreError> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64, StoreError> {
    Ok(u64::from_le_bytes(read_exact::<8>(r)?))
}

// ---------------------------------------------------------------------------
// Tensor store
// ---------------------------------------------------------------------------

/// Fixed-shape f32 records. Layout: magic, version, ndim (u32), dims
/// (u32 each), record count (u64), then `count * prod(shape)` f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorStore {
    pub shape: Vec<usize>,
    pub records: Vec<Vec<f32>>,
}

impl TensorStore {
    pub fn record_len(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn write_tensor_store(
    path: &Path,
    shape: &[usize],
    records: &[Vec<f64>],
) -> Result<(), StoreError> {
    let expected: usize = shape.iter().product();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TENSOR_MAGIC)?;
    write_u32(&mut w, STORE_VERSION)?;
    write_u32(&mut w, shape.len() as u32)?;
    for &d in shape {
        write_u32(&mut w, d as u32)?;
    }
    write_u64(&mut w, records.len() as u64)?;
    for (index, record) in records.iter().enumerate() {
        if record.len() != expected {
            return Err(StoreError::RecordShape {
                index,
                got: record.len(),
                expected,
            });
        }
        for &v in record {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor_store(path: &Path) -> Result<TensorStore, StoreError> {
    let mut r = BufReader::new(File::open(path)?);
    if &read_exact::<8>(&mut r)? != TENSOR_MAGIC {
        return Err(StoreError::BadMagic {
            expected: TENSOR_MAGIC,
        });
    }
    let version = read_u32(&mut r)?;
    if version != STORE_VERSION {
        return Err(StoreError::BadVersion(version));
    }
    let ndim = read_u32(&mut r)? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(StoreError::Malformed(format!("ndim {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(&mut r)? as usize);
    }
    let record_len: usize = shape.iter().product();
    if record_len == 0 {
        return Err(StoreError::Malformed("zero-sized record shape".into()));
    }
    let count = read_u64(&mut r)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let mut rec = Vec::with_capacity(record_len);
        for _ in 0..record_len {
            rec.push(f32::from_le_bytes(read_exact::<4>(&mut r)?));
        }
        records.push(rec);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(StoreError::Malformed("trailing bytes after payload".into()));
    }
    Ok(TensorStore { shape, records })
}

// ---------------------------------------------------------------------------
// Model store
// ---------------------------------------------------------------------------

/// A named row-major f64 matrix (vectors use shape `[n, 1]` or `[n]`).
#[derive(Debug, Clone, PartialEq)]
pub struct NamedMatrix {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedMatrix {
    pub fn new(name: &str, shape: Vec<usize>, data: Vec<f64>) -> NamedMatrix {
        NamedMatrix {
            name: name.to_string(),
            shape,
            data,
        }
    }
}

/// A fitted model or transform: a kind tag plus its parameter matrices.
/// Layout: magic, version, kind (u32 length + UTF-8 bytes), matrix count
/// (u32), then per matrix: name (u32 + bytes), ndim (u32), dims (u32 each),
/// f64 values. All f64 payloads round-trip bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelStore {
    pub kind: String,
    pub matrices: Vec<NamedMatrix>,
}

impl ModelStore {
    pub fn matrix(&self, name: &str) -> Option<&NamedMatrix> {
        self.matrices.iter().find(|m| m.name == name)
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> Result<String, StoreError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(StoreError::Malformed(format!("string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| StoreError::Malformed(e.to_string()))
}

pub fn write_model_store(path: &Path, model: &ModelStore) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    write_u32(&mut w, STORE_VERSION)?;
    write_str(&mut w, &model.kind)?;
    write_u32(&mut w, model.matrices.len() as u32)?;
    for (index, m) in model.matrices.iter().enumerate() {
        let expected: usize = m.shape.iter().product();
        if m.data.len() != expected {
            return Err(StoreError::RecordShape {
                index,
                got: m.data.len(),
                expected,
            });
        }
        write_str(&mut w, &m.name)?;
        write_u32(&mut w, m.shape.len() as u32)?;
        for &d in &m.shape {
            write_u32(&mut w, d as u32)?;
        }
        for &v in &m.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_model_store(path: &Path) -> Result<ModelStore, StoreError> {
    let mut r = BufReader::new(File::open(path)?);
    if &read_exact::<8>(&mut r)? != MODEL_MAGIC {
        return Err(StoreError::BadMagic {
            expected: MODEL_MAGIC,
        });
    }
    let version = read_u32(&mut r)?;
    if version != STORE_VERSION {
        return Err(StoreError::BadVersion(version));
    }
    let kind = read_str(&mut r)?;
    let n_matrices = read_u32(&mut r)? as usize;
    let mut matrices = Vec::with_capacity(n_matrices);
    for _ in 0..n_matrices {
        let name = read_str(&mut r)?;
        let ndim = read_u32(&mut r)? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(StoreError::Malformed(format!("ndim {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(read_exact::<8>(&mut r)?));
        }
        matrices.push(NamedMatrix { name, shape, data });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(StoreError::Malformed("trailing bytes after payload".into()));
    }
    Ok(ModelStore { kind, matrices })
}

// ---------------------------------------------------------------------------
// PPM export
// ---------------------------------------------------------------------------

/// Write an EEG image as a binary P6 portable pixmap. Channel values are
/// clamped to [0, 1] and quantized to 8 bits; the alpha/beta/gamma planes
/// map to R/G/B.
pub fn write_ppm(path: &Path, image: &EegImage) -> Result<(), StoreError> {
    let (h, w, c) = image.data.dim();
    if c != 3 {
        return Err(StoreError::Malformed(format!("{c} planes, PPM needs 3")));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    for y in 0..h {
        for x in 0..w {
            for plane in 0..3 {
                let v = image.data[[y, x, plane]].clamp(0.0, 1.0);
                out.write_all(&[(v * 255.0).round() as u8])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
