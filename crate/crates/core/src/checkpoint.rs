//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MMNETCKP"
//! version    u32      1
//! digest     32 bytes SHA-256 of the run config
//! count      u64      number of entries
//! per entry, in manifest order:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   data     f64 x product(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::MmNet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MMNETCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub entries: Vec<(String, Tensor)>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err("checkpoint is truncated"),
        _ => Error::Io(e),
    })
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

impl Checkpoint {
    pub fn from_model(model: &MmNet, config: &RunConfig) -> Self {
        let entries = model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        Self { digest: config.digest(), entries }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.digest)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &read_array::<8>(r)? != MAGIC {
            return Err(format_err("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version}")));
        }
        let digest = read_array::<32>(r)?;
        let count = read_u64(r)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| format_err("entry name is not UTF-8"))?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let bytes = shape
                .iter()
                .try_fold(8usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| format_err(format!("entry `{name}` has an impossible shape {shape:?}")))?;
            let mut raw = Vec::new();
            r.take(bytes as u64).read_to_end(&mut raw)?;
            if raw.len() != bytes {
                return Err(format_err("checkpoint is truncated"));
            }
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| format_err(format!("entry `{name}`: {e}")))?;
            entries.push((name, t));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(format_err("trailing bytes after the last entry"));
        }
        Ok(Self { digest, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to memory cannot fail");
        v
    }

    /// Rebuild the model described by `config`. The digest must match and
    /// every manifest entry must be present with the right shape.
    pub fn restore(&self, config: &RunConfig) -> Result<MmNet> {
        if self.digest != config.digest() {
            return Err(Error::Config(format!(
                "checkpoint digest {} does not match config digest {}",
                hex::encode(self.digest),
                config.digest_hex()
            )));
        }
        let mut model = MmNet::new(config.model, &mut crate::Rng::new(config.seed))?;
        let store = model.params_mut();
        if store.len() != self.entries.len() {
            return Err(format_err(format!(
                "checkpoint has {} entries, model expects {}",
                self.entries.len(),
                store.len()
            )));
        }
        for (i, (name, t)) in self.entries.iter().enumerate() {
            if store.name(i) != name || store.tensor(i).shape() != t.shape() {
                return Err(format_err(format!(
                    "entry {i} is `{name}` {:?}, model expects `{}` {:?}",
                    t.shape(),
                    store.name(i),
                    store.tensor(i).shape()
                )));
            }
            *store.tensor_mut(i) = t.clone();
        }
        Ok(model)
    }
}
