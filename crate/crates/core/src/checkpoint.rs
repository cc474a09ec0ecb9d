//! `CKD1` checkpoint files: magic, `u32` tensor count, then for each tensor
//! `u32` rank, `u32` dims and the little-endian f64 payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{MlpParams, MlpSpec};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CKD1";

pub fn encode(tensors: &[Tensor<f64>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated { offset: self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Tensor<f64>>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a CKD1 checkpoint (bad magic)".into()));
    }
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(8).ok_or(Error::Format("tensor too large".into()))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            buf.len() - r.pos
        )));
    }
    Ok(tensors)
}

pub fn save_checkpoint(params: &MlpParams<f64>, path: &Path) -> Result<()> {
    fs::write(path, encode(params.tensors()))?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<Tensor<f64>>> {
    decode(&fs::read(path)?)
}

/// Loads a checkpoint and checks it against the `MlpSpec` shape table.
pub fn load_checkpoint(path: &Path, spec: &MlpSpec) -> Result<MlpParams<f64>> {
    MlpParams::from_tensors(spec, load_tensors(path)?)
}
