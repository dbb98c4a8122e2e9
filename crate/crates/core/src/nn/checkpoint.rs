//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic   "EOSLABCK"
//! version u32            = 1
//! config  depth u32, base u32, in u32, out u32, dropout f64, time u8
//! seed    u64
//! count   u32
//! count × { name_len u16, name utf-8, rank u8, dims u32 × rank, data f64 × numel }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Model, Params, UNetConfig};
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"EOSLABCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Config, seed and named buffers. Composite models store their extra
/// heads under prefixed names next to the UNet parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: UNetConfig,
    pub seed: u64,
    pub params: Params,
}

impl From<&Model> for Checkpoint {
    fn from(m: &Model) -> Self {
        Self {
            config: m.config.clone(),
            seed: m.seed,
            params: m.params.clone(),
        }
    }
}

impl Checkpoint {
    pub fn into_model(self) -> Model {
        Model {
            config: self.config,
            params: self.params,
            seed: self.seed,
        }
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        let mut w = ByteWriter::new(out);
        w.bytes(MAGIC)?;
        w.u32(CHECKPOINT_VERSION)?;
        let c = &self.config;
        for v in [c.depth, c.base_channels, c.in_channels, c.out_channels] {
            w.u32(v as u32)?;
        }
        w.f64(c.dropout_rate)?;
        w.u8(c.time_conditioning as u8)?;
        w.u64(self.seed)?;
        w.u32(self.params.len() as u32)?;
        for (name, t) in &self.params {
            w.str16(name)?;
            w.u8(t.shape().len() as u8)?;
            for &d in t.shape() {
                w.u32(d as u32)?;
            }
            for &v in t.data() {
                w.f64(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut r = ByteReader::new(input);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let config = UNetConfig {
            depth: r.u32()? as usize,
            base_channels: r.u32()? as usize,
            in_channels: r.u32()? as usize,
            out_channels: r.u32()? as usize,
            dropout_rate: r.f64()?,
            time_conditioning: r.u8()? != 0,
        };
        let seed = r.u64()?;
        let count = r.u32()?;
        let mut params = Params::new();
        for _ in 0..count {
            let name = r.str16()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t =
                Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("`{name}`: {e}")))?;
            params.insert(name, t);
        }
        r.expect_end()?;
        Ok(Self {
            config,
            seed,
            params,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    ckpt.write_to(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Checkpoint::read_from(&mut bytes.as_slice())
}
