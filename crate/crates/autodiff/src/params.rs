use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{AdError, Result};
use crate::graph::Tensor;

const MAGIC: &[u8; 4] = b"TCPS";
const VERSION: u32 = 1;

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(ArrayD::len).sum()
    }

    /// Little-endian binary: magic, version, count, then per tensor the
    /// name, rank, dims and `f64` data in standard order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in t.as_standard_layout().iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        fn take<const N: usize>(b: &mut &[u8]) -> Result<[u8; N]> {
            let mut buf = [0u8; N];
            b.read_exact(&mut buf).map_err(|_| AdError::Format("truncated".into()))?;
            Ok(buf)
        }
        if &take::<4>(&mut bytes)? != MAGIC {
            return Err(AdError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut bytes)?);
        if version != VERSION {
            return Err(AdError::Format(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(&mut bytes)?) as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let len = u32::from_le_bytes(take(&mut bytes)?) as usize;
            if bytes.len() < len {
                return Err(AdError::Format("truncated name".into()));
            }
            let name = std::str::from_utf8(&bytes[..len]).map_err(|_| AdError::Format("name not utf-8".into()))?.to_string();
            bytes = &bytes[len..];
            let ndim = u32::from_le_bytes(take(&mut bytes)?) as usize;
            let dims = (0..ndim).map(|_| Ok(u64::from_le_bytes(take(&mut bytes)?) as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let data = (0..n).map(|_| Ok(f64::from_le_bytes(take(&mut bytes)?))).collect::<Result<Vec<_>>>()?;
            let t = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| AdError::Format(e.to_string()))?;
            set.push(&name, t);
        }
        if !bytes.is_empty() {
            return Err(AdError::Format("trailing bytes".into()));
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
