//! Self-describing row-major numeric arrays and their on-disk format.
//!
//! `Tensor` holds `f64` values in memory; label maps are integer arrays.
//! Both serialize to the same container: magic `MSKT`, a dtype code, rank,
//! shape, then a row-major little-endian payload. Float payloads are stored
//! as 32-bit floats, so every value written through this module must already
//! be representable in single precision (see [`Tensor::quantize_f32`]).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"MSKT";
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_I32: u8 = 2;

/// Row-major numeric array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when every element is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Round every element to the nearest `f32`. Keeps in-memory values in
    /// the exact subset that the on-disk format can represent.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Interprets the tensor as C×H×W and returns (C, H, W).
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            other => Err(Error::shape(format!("expected rank-3 C×H×W tensor, got {other:?}"))),
        }
    }

    /// Interprets the tensor as H×W and returns (H, W).
    pub fn hw(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [h, w] => Ok((*h, *w)),
            other => Err(Error::shape(format!("expected rank-2 H×W tensor, got {other:?}"))),
        }
    }

    /// Slice of channel `c` for a C×H×W tensor.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.shape[1] * self.shape[2];
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_tensor(&mut w, &self.shape, DTYPE_F32, |w| {
            for &v in &self.data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
            Ok(())
        })
    }

    pub fn read_from(path: &Path) -> Result<Tensor> {
        let mut r = BufReader::new(File::open(path)?);
        let (dtype, shape) = read_header(&mut r, path)?;
        if dtype != DTYPE_F32 {
            return Err(Error::data(format!(
                "{}: expected f32 tensor (dtype {DTYPE_F32}), found dtype {dtype}",
                path.display()
            )));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| Error::data(format!("{}: truncated payload", path.display())))?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        Tensor::from_vec(&shape, data)
    }
}

/// Integer label map (0 = background, 1..K = organ id).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    shape: Vec<usize>,
    data: Vec<i32>,
}

impl LabelMap {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        LabelMap {
            shape: shape.to_vec(),
            data: vec![0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<i32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "label data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(LabelMap {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [i32] {
        &mut self.data
    }

    pub fn hw(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [h, w] => Ok((*h, *w)),
            other => Err(Error::shape(format!("expected rank-2 label map, got {other:?}"))),
        }
    }

    /// Binary H×W mask selecting pixels with the given label value.
    pub fn mask_of(&self, value: i32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| if v == value { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_tensor(&mut w, &self.shape, DTYPE_I32, |w| {
            for &v in &self.data {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        })
    }

    pub fn read_from(path: &Path) -> Result<LabelMap> {
        let mut r = BufReader::new(File::open(path)?);
        let (dtype, shape) = read_header(&mut r, path)?;
        if dtype != DTYPE_I32 {
            return Err(Error::data(format!(
                "{}: expected i32 tensor (dtype {DTYPE_I32}), found dtype {dtype}",
                path.display()
            )));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| Error::data(format!("{}: truncated payload", path.display())))?;
            data.push(i32::from_le_bytes(buf));
        }
        LabelMap::from_vec(&shape, data)
    }
}

fn write_tensor<W: Write>(
    w: &mut W,
    shape: &[usize],
    dtype: u8,
    payload: impl FnOnce(&mut W) -> Result<()>,
) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[dtype, shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    payload(w)?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R, path: &Path) -> Result<(u8, Vec<usize>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::data(format!("{}: file too short for header", path.display())))?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::data(format!("{}: bad magic {magic:?}", path.display())));
    }
    let mut meta = [0u8; 2];
    r.read_exact(&mut meta)
        .map_err(|_| Error::data(format!("{}: truncated header", path.display())))?;
    let (dtype, rank) = (meta[0], meta[1] as usize);
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut dim = [0u8; 4];
        r.read_exact(&mut dim)
            .map_err(|_| Error::data(format!("{}: truncated shape", path.display())))?;
        shape.push(u32::from_le_bytes(dim) as usize);
    }
    Ok((dtype, shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mskt");
        let mut t = Tensor::from_vec(&[2, 2, 2], (0..8).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
        t.quantize_f32();
        t.write_to(&path).unwrap();
        let back = Tensor::read_from(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn label_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.mskt");
        let l = LabelMap::from_vec(&[2, 3], vec![0, 1, 2, 0, 3, 0]).unwrap();
        l.write_to(&path).unwrap();
        assert_eq!(l, LabelMap::read_from(&path).unwrap());
    }

    #[test]
    fn truncated_tensor_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mskt");
        let t = Tensor::zeros(&[4, 4]);
        t.write_to(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match Tensor::read_from(&path) {
            Err(Error::Data(_)) => {}
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn mask_of_selects_label_value() {
        let l = LabelMap::from_vec(&[1, 4], vec![0, 2, 1, 2]).unwrap();
        assert_eq!(l.mask_of(2).data(), &[0.0, 1.0, 0.0, 1.0]);
    }
}
