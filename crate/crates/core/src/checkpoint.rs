//! Versioned binary checkpoints.
//!
//! All integers are little-endian; strings are a `u32` byte length followed by
//! UTF-8 bytes.
//!
//! ```text
//! magic      8 bytes  "MMRECKPT"
//! version    u32      1
//! config     u64 length + UTF-8 key=value text
//! epoch      u64
//! metrics    u32 count, then per metric: string name, f64 value
//! items      u64 count, then per item: string id
//! tensors    u32 count, then per tensor:
//!              string name, u8 trainable (0/1), u64 rows, u64 cols,
//!              rows·cols f64 values in row-major order
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MMRECKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

impl NamedTensor {
    pub fn trainable(name: &str, value: Tensor) -> Self {
        NamedTensor {
            name: name.into(),
            trainable: true,
            value,
        }
    }

    pub fn constant(name: &str, value: Tensor) -> Self {
        NamedTensor {
            name: name.into(),
            trainable: false,
            value,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// The run configuration as `key=value` text.
    pub config: String,
    pub epoch: usize,
    pub metrics: Vec<(String, f64)>,
    pub items: Vec<String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.value)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        b.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        b.extend_from_slice(&(self.metrics.len() as u32).to_le_bytes());
        for (name, v) in &self.metrics {
            put_str(&mut b, name);
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.items.len() as u64).to_le_bytes());
        for id in &self.items {
            put_str(&mut b, id);
        }
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut b, &t.name);
            b.push(u8::from(t.trainable));
            b.extend_from_slice(&(t.value.rows() as u64).to_le_bytes());
            b.extend_from_slice(&(t.value.cols() as u64).to_le_bytes());
            for v in t.value.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic bytes"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported version {version}"),
            ));
        }
        let len = r.u64()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "config is not UTF-8"))?;
        let epoch = r.u64()? as usize;
        let n = r.u32()?;
        let mut metrics = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            metrics.push((name, r.f64()?));
        }
        let n = r.u64()?;
        let mut items = Vec::new();
        for _ in 0..n {
            items.push(r.string()?);
        }
        let n = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                x => {
                    return Err(Error::format(
                        "checkpoint",
                        format!("bad trainable flag {x}"),
                    ))
                }
            };
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let count = rows
                .checked_mul(cols)
                .filter(|c| c.saturating_mul(8) <= bytes.len())
                .ok_or_else(|| {
                    Error::format("checkpoint", format!("tensor {name} is too large"))
                })?;
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(r.f64()?);
            }
            tensors.push(NamedTensor {
                name,
                trainable,
                value: Tensor::from_vec(rows, cols, data)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint {
            config,
            epoch,
            metrics,
            items,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "string is not UTF-8"))
    }
}
