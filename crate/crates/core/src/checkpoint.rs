//! Named-tensor checkpoint bundles.
//!
//! Portable binary format shared by the captioner and the retrieval
//! encoders: a magic/version header followed by named tensors stored as
//! shape + row-major little-endian `f64` values.

use crate::tape::Matrix;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"NTB\0";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes; not a checkpoint bundle")]
    BadMagic,
    #[error("unsupported schema version {0}")]
    BadVersion(u32),
    #[error("tensor name is not valid utf-8")]
    BadName,
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        got: (usize, usize),
        expected: (usize, usize),
    },
}

/// An ordered collection of named matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Bundle {
    pub tensors: Vec<(String, Matrix)>,
}

impl Bundle {
    pub fn new() -> Self {
        Bundle { tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    pub fn get(&self, name: &str) -> Result<&Matrix, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(SCHEMA_VERSION)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, m) in &self.tensors {
            let bytes = name.as_bytes();
            w.write_u16::<LittleEndian>(bytes.len() as u16)?;
            w.write_all(bytes)?;
            w.write_u32::<LittleEndian>(m.nrows() as u32)?;
            w.write_u32::<LittleEndian>(m.ncols() as u32)?;
            for v in m.iter() {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != SCHEMA_VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.read_u16::<LittleEndian>()? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::BadName)?;
            let rows = r.read_u32::<LittleEndian>()? as usize;
            let cols = r.read_u32::<LittleEndian>()? as usize;
            let mut data = vec![0.0; rows * cols];
            for v in data.iter_mut() {
                *v = r.read_f64::<LittleEndian>()?;
            }
            let m = Matrix::from_shape_vec((rows, cols), data)
                .expect("shape consistent by construction");
            tensors.push((name, m));
        }
        Ok(Bundle { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }

    /// Copies a tensor out of the bundle, checking its shape.
    pub fn take(&self, name: &str, expected: (usize, usize)) -> Result<Matrix, CheckpointError> {
        let m = self.get(name)?;
        if m.dim() != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                got: m.dim(),
                expected,
            });
        }
        Ok(m.clone())
    }
}
