//! `RCMP` checkpoint files.
//!
//! Layout (little-endian): magic `RCMP`, `u32` version 1, the model config
//! block (nine `u32` sizes in declaration order, `f64` dropout rate, `u32`
//! tie flag), then named tensors until end of file, each as `u32` name
//! length, name bytes, `u32` rank, `u32` dims, `f64` values row-major.
//!
//! Model tensors come first in [`ModelParameters::named`] order; any
//! further tensors (training step, optimizer moments) follow as extras.

use std::io::{Read, Write};

use super::{Mat, Model, ModelConfig, ModelParameters};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RCMP";
const VERSION: u32 = 1;

/// A tensor stored in a checkpoint that is not a model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub extras: Vec<ExtraTensor>,
}

impl Checkpoint {
    pub fn extra(&self, name: &str) -> Option<&ExtraTensor> {
        self.extras.iter().find(|t| t.name == name)
    }
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::config("value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_tensor<W: Write>(w: &mut W, name: &str, dims: &[usize], values: &[f64]) -> Result<()> {
    put_u32(w, name.len())?;
    w.write_all(name.as_bytes())?;
    put_u32(w, dims.len())?;
    for &d in dims {
        put_u32(w, d)?;
    }
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(model: &Model, extras: &[ExtraTensor], mut w: W) -> Result<()> {
    let c = &model.config;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [
        c.num_layers,
        c.hidden_size,
        c.num_heads,
        c.ffn_size,
        c.vocab_size,
        c.max_freq_features,
        c.max_time_features,
        c.max_antenna_features,
        c.max_seq_len,
    ] {
        put_u32(&mut w, v)?;
    }
    w.write_all(&c.dropout_rate.to_le_bytes())?;
    put_u32(&mut w, c.tie_mlm_weights as usize)?;
    for (name, t) in model.params.named() {
        put_tensor(&mut w, &name, &[t.rows(), t.cols()], t.data())?;
    }
    for e in extras {
        put_tensor(&mut w, &e.name, &e.dims, &e.values)?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("checkpoint", format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let mut sizes = [0usize; 9];
    for s in &mut sizes {
        *s = c.u32()?;
    }
    let config = ModelConfig {
        num_layers: sizes[0],
        hidden_size: sizes[1],
        num_heads: sizes[2],
        ffn_size: sizes[3],
        vocab_size: sizes[4],
        max_freq_features: sizes[5],
        max_time_features: sizes[6],
        max_antenna_features: sizes[7],
        max_seq_len: sizes[8],
        dropout_rate: c.f64()?,
        tie_mlm_weights: c.u32()? != 0,
    };
    config
        .validate()
        .map_err(|e| Error::format("checkpoint", e.to_string()))?;

    let mut tensors = Vec::new();
    while !c.done() {
        let len = c.u32()?;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
        let rank = c.u32()?;
        let dims = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let values = (0..count).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push(ExtraTensor { name, dims, values });
    }

    let mut params = ModelParameters::zeros(&config);
    let expected = params.named_mut();
    if tensors.len() < expected.len() {
        return Err(Error::format(
            "checkpoint",
            format!("expected {} model tensors, found {}", expected.len(), tensors.len()),
        ));
    }
    let mut stored = tensors.into_iter();
    for (name, slot) in expected {
        let t = stored.next().expect("length checked");
        if t.name != name || t.dims != [slot.rows(), slot.cols()] {
            return Err(Error::format(
                "checkpoint",
                format!("expected tensor {name} {:?}, found {} {:?}", slot.shape(), t.name, t.dims),
            ));
        }
        *slot = Mat::from_vec(slot.rows(), slot.cols(), t.values);
    }
    Ok(Checkpoint {
        model: Model { config, params },
        extras: stored.collect(),
    })
}
