//! Flat binary tensor files for channel and precoder batches.
//!
//! Layout of a tensor file (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes   "HBFTENS1"
//! rows     u32       N_r for channels
//! cols     u32       N_t for channels
//! batch    u32
//! data     batch × rows × cols × (f64 re, f64 im), row-major per matrix
//! ```
//!
//! A precoder file is `"HBFPREC1"`, a one-byte structure tag, then two
//! embedded tensor blocks (analog stage, then digital stage) in the layout
//! above. Each data file may carry a `<path>.meta` text sidecar of
//! `key = value` lines.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::linalg::{ComplexMatrix, C64};
use crate::precoders::{AnalogStructure, HybridPrecoder};

pub const TENSOR_MAGIC: &[u8; 8] = b"HBFTENS1";
pub const PRECODER_MAGIC: &[u8; 8] = b"HBFPREC1";

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic bytes {found:?}")]
    BadMagic { found: [u8; 8] },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("matrix {index} is {found:?}, batch shape is {expected:?}")]
    RaggedBatch {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("unknown precoder structure tag {0}")]
    UnknownStructure(u8),
}

fn write_block<W: Write>(w: &mut W, batch: &[ComplexMatrix]) -> Result<(), TensorIoError> {
    let first = batch.first().ok_or(TensorIoError::EmptyBatch)?;
    let shape = first.shape();
    for (index, m) in batch.iter().enumerate() {
        if m.shape() != shape {
            return Err(TensorIoError::RaggedBatch {
                index,
                expected: shape,
                found: m.shape(),
            });
        }
    }
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(shape.0 as u32).to_le_bytes())?;
    w.write_all(&(shape.1 as u32).to_le_bytes())?;
    w.write_all(&(batch.len() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(shape.0 * shape.1 * 16);
    for m in batch {
        buf.clear();
        for z in m.as_slice() {
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_block<R: Read>(r: &mut R) -> Result<Vec<ComplexMatrix>, TensorIoError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(TensorIoError::BadMagic { found: magic });
    }
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let batch = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(batch);
    let mut buf = vec![0u8; rows * cols * 16];
    for _ in 0..batch {
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(16)
            .map(|c| {
                let re = f64::from_le_bytes(c[..8].try_into().unwrap());
                let im = f64::from_le_bytes(c[8..].try_into().unwrap());
                C64::new(re, im)
            })
            .collect();
        out.push(ComplexMatrix::from_vec(rows, cols, data));
    }
    Ok(out)
}

pub fn write_tensor(path: &Path, batch: &[ComplexMatrix]) -> Result<(), TensorIoError> {
    let mut buf = Vec::new();
    write_block(&mut buf, batch)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Vec<ComplexMatrix>, TensorIoError> {
    let bytes = fs::read(path)?;
    read_block(&mut bytes.as_slice())
}

fn structure_tag(s: AnalogStructure) -> u8 {
    match s {
        AnalogStructure::FullyConnected => 0,
        AnalogStructure::SubConnected => 1,
    }
}

pub fn write_precoders(path: &Path, batch: &[HybridPrecoder]) -> Result<(), TensorIoError> {
    let first = batch.first().ok_or(TensorIoError::EmptyBatch)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(PRECODER_MAGIC);
    buf.push(structure_tag(first.structure));
    let fa: Vec<ComplexMatrix> = batch.iter().map(|p| p.f_a.clone()).collect();
    let fd: Vec<ComplexMatrix> = batch.iter().map(|p| p.f_d.clone()).collect();
    write_block(&mut buf, &fa)?;
    write_block(&mut buf, &fd)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_precoders(path: &Path) -> Result<Vec<HybridPrecoder>, TensorIoError> {
    let bytes = fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != PRECODER_MAGIC {
        return Err(TensorIoError::BadMagic { found: magic });
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let structure = match tag[0] {
        0 => AnalogStructure::FullyConnected,
        1 => AnalogStructure::SubConnected,
        t => return Err(TensorIoError::UnknownStructure(t)),
    };
    let fa = read_block(&mut r)?;
    let fd = read_block(&mut r)?;
    Ok(fa
        .into_iter()
        .zip(fd)
        .map(|(f_a, f_d)| HybridPrecoder { f_a, f_d, structure })
        .collect())
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes `key = value` lines next to `path`. String values are quoted so the
/// file parses as TOML.
pub fn write_sidecar(path: &Path, entries: &[(&str, String)]) -> io::Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(k);
        text.push_str(" = ");
        text.push_str(&toml::Value::String(v.clone()).to_string());
        text.push('\n');
    }
    fs::write(sidecar_path(path), text)
}
