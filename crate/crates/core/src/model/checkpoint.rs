//! `.ssk` checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "SSPK" | version: u16
//! n_config: u32 | n_config × (key: str, value: str)
//! n_params: u32 | n_params × (name: str, ndim: u8, dims: ndim × u32, data: f32 × prod(dims))
//! ```
//!
//! where `str` is a `u16` byte length followed by UTF-8.

use std::fs;
use std::path::Path;

use super::{Layers, ModelConfig, StereoSpikeNet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SSPK";
pub const VERSION: u16 = 1;

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode<T: Scalar>(net: &StereoSpikeNet<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let pairs = net.config().to_pairs();
    buf.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    for (k, v) in &pairs {
        put_str(&mut buf, k);
        put_str(&mut buf, v);
    }
    let layers = net.layers();
    let names = layers.names();
    buf.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for (name, t) in names.iter().zip(layers.slots()) {
        put_str(&mut buf, name);
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(self.origin.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.format("string is not UTF-8"))
    }

    fn format(&self, detail: &str) -> Error {
        Error::Format { path: self.origin.to_string(), detail: detail.to_string() }
    }
}

/// Parses a checkpoint. With `expected`, every stored config field must
/// match it; the first differing field is reported by name.
pub fn decode<T: Scalar>(bytes: &[u8], origin: &str, expected: Option<&ModelConfig>) -> Result<StereoSpikeNet<T>> {
    let mut r = Reader { bytes, pos: 0, origin };
    if r.take(4)? != MAGIC {
        return Err(r.format("bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Version { path: origin.to_string(), found: version, expected: VERSION });
    }
    let mut config = ModelConfig::default();
    let n_pairs = r.u32()?;
    let mut pairs = Vec::new();
    for _ in 0..n_pairs {
        let (k, v) = (r.str()?, r.str()?);
        config.set(&k, &v)?;
        pairs.push((k, v));
    }
    if let Some(want) = expected {
        for (k, v) in want.to_pairs() {
            match pairs.iter().find(|(pk, _)| *pk == k) {
                Some((_, pv)) if *pv == v => {}
                Some((_, pv)) => {
                    return Err(Error::config(&k, format!("checkpoint has `{pv}`, expected `{v}`")));
                }
                None => return Err(Error::config(&k, "missing from checkpoint")),
            }
        }
    }
    config.validate()?;

    let shapes = config.layer_shapes();
    let n_params = r.u32()? as usize;
    if n_params != shapes.names().len() {
        return Err(r.format(&format!("{n_params} parameters, model needs {}", shapes.names().len())));
    }
    let mut tensors = Vec::with_capacity(n_params);
    for name in shapes.names() {
        let stored = r.str()?;
        if stored != name {
            return Err(r.format(&format!("expected parameter `{name}`, found `{stored}`")));
        }
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| r.format("tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect();
        tensors.push(Tensor::from_vec(&dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(r.format("trailing bytes"));
    }
    let mut it = tensors.into_iter();
    let layers: Layers<Tensor<T>> = shapes.map(|_| it.next().unwrap());
    StereoSpikeNet::from_layers(config, layers)
}

pub fn save<T: Scalar>(net: &StereoSpikeNet<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(net)).map_err(Error::io(path))
}

pub fn load<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<StereoSpikeNet<T>> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes, &path.display().to_string(), expected)
}
