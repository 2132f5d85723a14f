//! Binary checkpoint: little-endian, `SKLM` magic, version, config block,
//! then the parameter groups as row-major f64 in [`LmParameters::groups`]
//! order.

use std::io::Write;
use std::path::Path;

use super::{LmConfig, LmParameters};
use crate::error::{Error, Result};
use crate::io::{write_atomic_with, LeReader};

const MAGIC: &[u8; 4] = b"SKLM";
const VERSION: u32 = 1;

impl LmParameters {
    pub fn write_to(&self, w: &mut dyn Write) -> std::io::Result<()> {
        let c = &self.config;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for dim in [
            c.context_window,
            c.embedding_dim,
            c.hidden_dim,
            c.vocab_size,
        ] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        w.write_all(&c.learning_rate.to_le_bytes())?;
        w.write_all(&(c.epochs as u32).to_le_bytes())?;
        w.write_all(&(c.batch_size as u32).to_le_bytes())?;
        w.write_all(&c.seed.to_le_bytes())?;
        for (_, group) in self.groups() {
            for x in group {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = LeReader::new(bytes);
        if r.bytes(4)? != MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let context_window = r.u32()? as usize;
        let embedding_dim = r.u32()? as usize;
        let hidden_dim = r.u32()? as usize;
        let vocab_size = r.u32()? as usize;
        let config = LmConfig {
            context_window,
            embedding_dim,
            hidden_dim,
            vocab_size,
            learning_rate: r.f64()?,
            epochs: r.u32()? as usize,
            batch_size: r.u32()? as usize,
            seed: r.u64()?,
        };
        config.validate()?;
        let (v, m, d, n) = (vocab_size, embedding_dim, hidden_dim, context_window);
        let params = LmParameters {
            embeddings: r.f64_vec(v * m)?,
            position_weights: r.f64_vec(n)?,
            w1: r.f64_vec(d * m)?,
            b1: r.f64_vec(d)?,
            w2: r.f64_vec(v * d)?,
            b2: r.f64_vec(v)?,
            config,
        };
        r.finish()?;
        if !params.is_finite() {
            return Err(Error::Format(
                "checkpoint contains non-finite values".into(),
            ));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic_with(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_bytes(&bytes)
    }
}
