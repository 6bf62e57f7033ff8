//! `HPDMCKPT` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "HPDMCKPT" | version u32 | count u32
//! count × record          (parameters)
//! count × record          (EMA parameters, same names and shapes)
//! step u64 | count × record (first moments) | count × record (second moments)
//! config_hash u64 | config_len u32 | config text (UTF-8)
//! crc32 u32               (over every preceding byte)
//!
//! record = name_len u32 | name | rank u32 | dims u32 × rank | f32 payload
//! ```

use std::path::Path;

use super::{OptimizerState, Tensor};
use crate::codec::{ByteReader, ByteWriter};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HPDMCKPT";
pub const VERSION: u32 = 1;
const WHAT: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub names: Vec<String>,
    pub params: Vec<Tensor<f32>>,
    pub ema: Vec<Tensor<f32>>,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub config_hash: u64,
    pub config_text: String,
}

impl Checkpoint {
    pub fn from_state(
        names: &[String],
        params: &[Tensor<f32>],
        opt: &OptimizerState,
        config_hash: u64,
        config_text: &str,
    ) -> Self {
        Self {
            names: names.to_vec(),
            params: params.to_vec(),
            ema: opt.ema.clone(),
            step: opt.step,
            m: opt.m.clone(),
            v: opt.v.clone(),
            config_hash,
            config_text: config_text.to_string(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.names.len() as u32);
        let records = |w: &mut ByteWriter, ts: &[Tensor<f32>]| {
            for (name, t) in self.names.iter().zip(ts) {
                w.str(name);
                w.tensor(t);
            }
        };
        records(&mut w, &self.params);
        records(&mut w, &self.ema);
        w.u64(self.step);
        records(&mut w, &self.m);
        records(&mut w, &self.v);
        w.u64(self.config_hash);
        w.str(&self.config_text);
        w.finish_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, WHAT);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion { what: WHAT, version });
        }
        let count = r.u32()? as usize;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for _ in 0..count {
            names.push(r.str()?);
            params.push(r.tensor()?);
        }
        let section = |r: &mut ByteReader| -> Result<Vec<Tensor<f32>>> {
            let mut out = Vec::new();
            for (i, name) in names.iter().enumerate() {
                if &r.str()? != name {
                    return Err(r.malformed(format!("record {i} name does not match `{name}`")));
                }
                let t = r.tensor()?;
                if t.shape() != params[i].shape() {
                    return Err(r.malformed(format!("record `{name}` shape differs")));
                }
                out.push(t);
            }
            Ok(out)
        };
        let ema = section(&mut r)?;
        let step = r.u64()?;
        let m = section(&mut r)?;
        let v = section(&mut r)?;
        let config_hash = r.u64()?;
        let config_text = r.str()?;
        r.crc_footer()?;
        r.finish()?;
        Ok(Self {
            names,
            params,
            ema,
            step,
            m,
            v,
            config_hash,
            config_text,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
