//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "ELLECKP1"
//! input_dim   u32
//! n_hidden    u32
//! hidden[i]   u32 * n_hidden
//! classes     u32
//! activation  u8       0 = relu, 1 = softplus
//! init_seed   u64
//! n_tensors   u32
//! per tensor: rank u32, extents u32 * rank, payload f64 * prod(extents)
//! ```
//!
//! Tensors are stored layer by layer, weight before bias.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Activation, Layer, Mlp, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ELLECKP1";

pub fn encode(model: &Mlp) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(c.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(c.hidden.len() as u32).to_le_bytes());
    for &h in &c.hidden {
        out.extend_from_slice(&(h as u32).to_le_bytes());
    }
    out.extend_from_slice(&(c.classes as u32).to_le_bytes());
    out.push(c.activation.code());
    out.extend_from_slice(&c.init_seed.to_le_bytes());
    let tensors: Vec<&Tensor> = model.tensors().collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Mlp> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let input_dim = c.u32()?;
    let n_hidden = c.u32()?;
    let hidden = (0..n_hidden).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let classes = c.u32()?;
    let act = c.take(1)?[0];
    let activation = Activation::from_code(act)
        .ok_or_else(|| Error::Checkpoint(format!("unknown activation code {act}")))?;
    let init_seed = c.u64()?;
    let config = ModelConfig {
        input_dim,
        hidden,
        classes,
        activation,
        init_seed,
    };

    let n = c.u32()?;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().product();
        let data = (0..len).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push(Tensor::new(shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    if tensors.len() % 2 != 0 {
        return Err(Error::Checkpoint("odd tensor count".into()));
    }
    let mut it = tensors.into_iter();
    let mut layers = Vec::new();
    while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
        layers.push(Layer { weight, bias });
    }
    Mlp::from_layers(config, layers).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(model: &Mlp, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Mlp> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            input_dim: 5,
            hidden: vec![4, 3],
            classes: 3,
            activation: Activation::Softplus,
            init_seed: 11,
        };
        let mut m = Mlp::new(cfg).unwrap();
        m.layers[1].bias.data_mut()[2] = -1.0 / 3.0;
        let bytes = encode(&m);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let m = Mlp::new(ModelConfig {
            input_dim: 2,
            hidden: vec![2],
            classes: 2,
            activation: Activation::Relu,
            init_seed: 0,
        })
        .unwrap();
        let bytes = encode(&m);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
