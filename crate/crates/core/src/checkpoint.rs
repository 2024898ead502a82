//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `"DITC"`, `u32` version, `u64`-prefixed config text, `u64` optimizer step,
//! `u32` parameter count, then per parameter: `u32`-prefixed name, `u32`
//! rank, `u64` dims, and three `f64` blobs (value, first moment, second moment).

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grid::DitModel;
use crate::optim::AdamW;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DITC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlob {
    pub name: String,
    pub value: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub step: u64,
    pub params: Vec<ParamBlob>,
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, wide: bool) -> Result<usize> {
        let n = if wide { self.u64()? } else { self.u32()? as u64 };
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {n}")))
    }

    fn string(&mut self, wide: bool) -> Result<String> {
        let n = self.len(wide)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 text".into()))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, model: &DitModel, opt: &AdamW) -> Self {
        let params = model
            .store
            .iter()
            .map(|(id, p)| ParamBlob {
                name: p.name.clone(),
                value: p.value.clone(),
                m: opt.m[id.index()].clone(),
                v: opt.v[id.index()].clone(),
            })
            .collect();
        Self {
            config_text: config.to_text(),
            step: opt.step,
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            let shape = p.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for t in [&p.value, &p.m, &p.v] {
                for x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_text = r.string(true)?;
        let step = r.u64()?;
        let count = r.len(false)?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string(false)?;
            let rank = r.len(false)?;
            let shape = (0..rank).map(|_| r.len(true)).collect::<Result<Vec<_>>>()?;
            params.push(ParamBlob {
                name,
                value: r.tensor(&shape)?,
                m: r.tensor(&shape)?,
                v: r.tensor(&shape)?,
            });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            config_text,
            step,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config_text)
    }

    /// Rejects a checkpoint written under a different configuration, naming
    /// the first key that differs.
    pub fn check_config(&self, expected: &RunConfig) -> Result<()> {
        match self.config()?.first_difference(expected) {
            Some(key) => Err(Error::ConfigMismatch { key: key.to_string() }),
            None => Ok(()),
        }
    }

    /// Rebuilds the model and optimizer state.
    pub fn restore(&self) -> Result<(RunConfig, DitModel, AdamW)> {
        let cfg = self.config()?;
        let mut model = DitModel::new(cfg.grid.clone(), cfg.seed)?;
        let mut opt = AdamW::new(&model.store, cfg.train.weight_decay);
        if self.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters stored, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for blob in &self.params {
            let id = model
                .store
                .find(&blob.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", blob.name)))?;
            if model.store.value(id).shape() != blob.value.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {}", blob.name)));
            }
            *model.store.value_mut(id) = blob.value.clone();
            opt.m[id.index()] = blob.m.clone();
            opt.v[id.index()] = blob.v.clone();
        }
        opt.step = self.step;
        Ok((cfg, model, opt))
    }
}
