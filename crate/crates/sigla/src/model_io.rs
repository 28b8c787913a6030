//! Model files.
//!
//! Binary layout, little-endian throughout:
//!
//! ```text
//! magic "SGLM" | version u32 | n_sectors u32 | n_layers u32
//! per layer: name_len u32, name utf-8, submodel u8, activation u8,
//!            out u32, in u32, out·in weights f64, out bias f64
//! ```
//!
//! Files ending in `.json` use the serde representation instead.

use std::fs;
use std::path::Path;

use sigla_core::nn::{Activation, DenseLayer, Model, Submodel, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SGLM";
pub const VERSION: u32 = 1;

fn submodel_code(s: Submodel) -> u8 {
    match s {
        Submodel::Gps => 0,
        Submodel::Lidar => 1,
        Submodel::Image => 2,
        Submodel::Fusion => 3,
    }
}

fn activation_code(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Softmax => 1,
        Activation::Identity => 2,
    }
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * model.total_params());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.n_sectors() as u32).to_le_bytes());
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for (j, l) in model.layers().iter().enumerate() {
        out.extend_from_slice(&(l.name.len() as u32).to_le_bytes());
        out.extend_from_slice(l.name.as_bytes());
        out.push(submodel_code(model.submodel(j)));
        out.push(activation_code(l.activation));
        out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
        for v in l.weights.values().iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("size overflow")?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<Model, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a model file".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let n_sectors = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| e.to_string())?
            .to_string();
        let sub = match r.u8()? {
            0 => Submodel::Gps,
            1 => Submodel::Lidar,
            2 => Submodel::Image,
            3 => Submodel::Fusion,
            c => return Err(format!("bad submodel code {c}")),
        };
        let act = match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::Softmax,
            2 => Activation::Identity,
            c => return Err(format!("bad activation code {c}")),
        };
        let out = r.u32()? as usize;
        let inp = r.u32()? as usize;
        let w = r.f64s(out.checked_mul(inp).ok_or("size overflow")?)?;
        let b = r.f64s(out)?;
        let t = Tensor::matrix(out, inp, w).map_err(|e| e.to_string())?;
        layers.push((DenseLayer::new(name, t, b, act).map_err(|e| e.to_string())?, sub));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Model::new(layers, n_sectors).map_err(|e| e.to_string())
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    decode_inner(bytes).map_err(|m| Error::format("<memory>", m))
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = if is_json(path) {
        serde_json::to_vec_pretty(model)?
    } else {
        encode(model)
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if is_json(path) {
        Ok(serde_json::from_slice(&bytes)?)
    } else {
        decode_inner(&bytes).map_err(|m| Error::format(path, m))
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}

/// Size of the parameters on the wire at `bytes_per_param`.
pub fn wire_bytes(model: &Model, bytes_per_param: u32) -> u64 {
    model.total_params() as u64 * bytes_per_param as u64
}
