//! Binary model checkpoints.
//!
//! Layout (all integers `u32` little-endian, all reals `f64` little-endian):
//!
//! ```text
//! magic  b"FCNN"
//! version  (currently 1)
//! arch_len, arch id bytes (UTF-8)
//! layer_count
//! per layer: tag byte, then
//!   0 Dense      in, out, weight[in][out] row-major, bias[out]
//!   1 ReLU       -
//!   2 BatchNorm  dim, eps, momentum, gamma[dim], beta[dim], running_mean[dim], running_var[dim]
//!   3 Dropout    rate
//!   4 Softmax    -
//!   5 Sigmoid    -
//! ```

use std::io::{Read, Write};

use ndarray::{Array1, Array2};

use super::layer::{BatchNorm, Dense, Layer};
use super::model::Mlp;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"FCNN";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(model: &Mlp) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, model.arch().len() as u32);
    out.extend_from_slice(model.arch().as_bytes());
    put_u32(&mut out, model.layers().len() as u32);
    for layer in model.layers() {
        match layer {
            Layer::Dense(d) => {
                out.push(0);
                put_u32(&mut out, d.in_dim() as u32);
                put_u32(&mut out, d.out_dim() as u32);
                put_f64s(&mut out, d.weight.iter().copied());
                put_f64s(&mut out, d.bias.iter().copied());
            }
            Layer::Relu => out.push(1),
            Layer::BatchNorm(bn) => {
                out.push(2);
                put_u32(&mut out, bn.dim() as u32);
                put_f64s(&mut out, [bn.eps, bn.momentum]);
                for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                    put_f64s(&mut out, v.iter().copied());
                }
            }
            Layer::Dropout { rate } => {
                out.push(3);
                put_f64s(&mut out, [*rate]);
            }
            Layer::Softmax => out.push(4),
            Layer::Sigmoid => out.push(5),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn decode(bytes: &[u8]) -> Result<Mlp> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let arch_len = r.u32()?;
    let arch = String::from_utf8(r.take(arch_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("arch id is not UTF-8".into()))?;
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let layer = match r.u8()? {
            0 => {
                let (i, o) = (r.u32()?, r.u32()?);
                let weight = Array2::from_shape_vec((i, o), r.f64s(i * o)?)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                let bias = Array1::from(r.f64s(o)?);
                Layer::Dense(Dense { weight, bias })
            }
            1 => Layer::Relu,
            2 => {
                let dim = r.u32()?;
                let (eps, momentum) = (r.f64()?, r.f64()?);
                Layer::BatchNorm(BatchNorm {
                    gamma: Array1::from(r.f64s(dim)?),
                    beta: Array1::from(r.f64s(dim)?),
                    running_mean: Array1::from(r.f64s(dim)?),
                    running_var: Array1::from(r.f64s(dim)?),
                    eps,
                    momentum,
                })
            }
            3 => Layer::Dropout { rate: r.f64()? },
            4 => Layer::Softmax,
            5 => Layer::Sigmoid,
            tag => return Err(Error::Checkpoint(format!("unknown layer tag {tag}"))),
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Mlp::new(arch, layers)
}

pub fn write<W: Write>(model: &Mlp, mut writer: W) -> Result<()> {
    writer.write_all(&encode(model))?;
    Ok(())
}

pub fn read<R: Read>(mut reader: R) -> Result<Mlp> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    decode(&bytes)
}
