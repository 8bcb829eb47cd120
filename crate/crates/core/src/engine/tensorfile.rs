//! Binary container of named f32 tensors.
//!
//! Layout (little-endian): `b"TNSR"`, u32 version, u32 count, then per tensor
//! u32 name length, UTF-8 name, u32 rank, u64 per dimension, f32 payload.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use super::net::TrainableNet;

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a tensor container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("tensor name is not UTF-8")]
    Name,
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has {found} values, expected {expected}")]
    Shape { name: String, expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: Vec<f32>) -> Self {
        NamedTensor { name: name.into(), dims, data }
    }
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[NamedTensor]) -> Result<(), TensorError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for t in tensors {
        w.write_u32::<LittleEndian>(t.name.len() as u32)?;
        w.write_all(t.name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.dims.len() as u32)?;
        for &d in &t.dims {
            w.write_u64::<LittleEndian>(d)?;
        }
        for &v in &t.data {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<NamedTensor>, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::BadMagic);
    }
    let v = r.read_u32::<LittleEndian>()?;
    if v != VERSION {
        return Err(TensorError::Version(v));
    }
    let n = r.read_u32::<LittleEndian>()?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Name)?;
        let rank = r.read_u32::<LittleEndian>()?;
        let dims = (0..rank).map(|_| r.read_u64::<LittleEndian>()).collect::<Result<Vec<_>, _>>()?;
        let count: u64 = dims.iter().product();
        let mut data = vec![0f32; count as usize];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        out.push(NamedTensor { name, dims, data });
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<(), TensorError> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensors(f, tensors)
}

pub fn load_tensors(path: &Path) -> Result<Vec<NamedTensor>, TensorError> {
    read_tensors(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Named tensors for every parameter and running statistic of `net`.
pub fn net_tensors(net: &TrainableNet<f32>) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    for (i, p) in net.layers.iter().enumerate() {
        if p.weight.is_empty() {
            continue;
        }
        let wdims = net.weight_shape(i).into_iter().map(|d| d as u64).collect();
        out.push(NamedTensor::new(format!("layer{i}.weight"), wdims, p.weight.clone()));
        let b = vec![p.bias.len() as u64];
        out.push(NamedTensor::new(format!("layer{i}.bias"), b.clone(), p.bias.clone()));
        if !p.running_mean.is_empty() {
            out.push(NamedTensor::new(format!("layer{i}.running_mean"), b.clone(), p.running_mean.clone()));
            out.push(NamedTensor::new(format!("layer{i}.running_var"), b, p.running_var.clone()));
        }
    }
    out
}

/// Overwrites the parameters of `net` with tensors of matching names.
pub fn load_into(net: &mut TrainableNet<f32>, tensors: &[NamedTensor]) -> Result<(), TensorError> {
    let find = |name: &str, want: usize| -> Result<Vec<f32>, TensorError> {
        let t = tensors.iter().find(|t| t.name == name).ok_or_else(|| TensorError::Missing(name.to_string()))?;
        if t.data.len() != want {
            return Err(TensorError::Shape { name: name.to_string(), expected: want, found: t.data.len() });
        }
        Ok(t.data.clone())
    };
    for (i, p) in net.layers.iter_mut().enumerate() {
        if p.weight.is_empty() {
            continue;
        }
        p.weight = find(&format!("layer{i}.weight"), p.weight.len())?;
        p.bias = find(&format!("layer{i}.bias"), p.bias.len())?;
        if !p.running_mean.is_empty() {
            p.running_mean = find(&format!("layer{i}.running_mean"), p.running_mean.len())?;
            p.running_var = find(&format!("layer{i}.running_var"), p.running_var.len())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::presets;
    use crate::engine::build_network;

    #[test]
    fn container_round_trip() {
        let ts = vec![
            NamedTensor::new("a", vec![2, 3], (0..6).map(|i| i as f32 * 0.1).collect()),
            NamedTensor::new("empty", vec![0], vec![]),
            NamedTensor::new("scalar", vec![], vec![f32::MIN_POSITIVE]),
        ];
        let mut buf = Vec::new();
        write_tensors(&mut buf, &ts).unwrap();
        assert_eq!(read_tensors(buf.as_slice()).unwrap(), ts);
        buf[0] = b'X';
        assert!(matches!(read_tensors(buf.as_slice()), Err(TensorError::BadMagic)));
    }

    #[test]
    fn network_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.tnsr");
        let arch = presets::residual_teacher();
        let net = build_network::<f32>(&arch, 5).unwrap();
        save_tensors(&path, &net_tensors(&net)).unwrap();
        let mut other = build_network::<f32>(&arch, 6).unwrap();
        assert_ne!(other.layers, net.layers);
        load_into(&mut other, &load_tensors(&path).unwrap()).unwrap();
        assert_eq!(other.layers, net.layers);
        let wrong = build_network::<f32>(&presets::mnist_conv_teacher(), 0).unwrap();
        let mut wrong = wrong;
        assert!(load_into(&mut wrong, &net_tensors(&net)).is_err());
    }
}
