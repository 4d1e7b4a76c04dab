//! Binary tensor container (`WDT1`) and a named-section archive of tensors (`WDA1`).
//!
//! Tensor layout: magic `WDT1`, `u32` rank, `rank × u64` dims, then the payload as
//! little-endian `f64`. Archive layout: magic `WDA1`, `u32` section count, then per
//! section a `u32` name length, the UTF-8 name, a `u64` blob length and a tensor blob.

use std::io::{Read, Write};

use super::{NumericError, Tensor};

const TENSOR_MAGIC: &[u8; 4] = b"WDT1";
const ARCHIVE_MAGIC: &[u8; 4] = b"WDA1";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<(), NumericError> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.len());
    write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], NumericError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, NumericError> {
    let magic: [u8; 4] = read_array(r)?;
    if &magic != TENSOR_MAGIC {
        return Err(NumericError::Format(format!("bad tensor magic {magic:?}")));
    }
    let rank = u32::from_le_bytes(read_array(r)?) as usize;
    if rank > 16 {
        return Err(NumericError::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(read_array(r)?) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from_le_bytes(read_array(r)?));
    }
    Tensor::new(&shape, data)
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    sections: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.sections.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.sections.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.sections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), NumericError> {
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_all(&(self.sections.len() as u32).to_le_bytes())?;
        for (name, t) in &self.sections {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let blob = tensor_to_bytes(t);
            w.write_all(&(blob.len() as u64).to_le_bytes())?;
            w.write_all(&blob)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, NumericError> {
        let magic: [u8; 4] = read_array(r)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(NumericError::Format(format!("bad archive magic {magic:?}")));
        }
        let count = u32::from_le_bytes(read_array(r)?) as usize;
        let mut sections = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32::from_le_bytes(read_array(r)?) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| NumericError::Format(format!("section name is not UTF-8: {e}")))?;
            let blob_len = u64::from_le_bytes(read_array(r)?) as usize;
            let mut blob = vec![0u8; blob_len];
            r.read_exact(&mut blob)?;
            let t = read_tensor(&mut blob.as_slice())?;
            sections.push((name, t));
        }
        Ok(Self { sections })
    }
}
