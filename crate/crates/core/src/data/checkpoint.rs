use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSNC";
pub const VERSION: u32 = 1;

/// Ordered list of named `f32` tensors.
///
/// Layout (little-endian): `MSNC`, `u32` version, `u32` record count, then
/// per record `u16` name length, UTF-8 name, `u8` ndim, `ndim × u32` dims and
/// the `f32` payload, and finally a `u32` CRC-32 of all record bytes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        self.tensors.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn from_params(ps: &ParamStore<f32>) -> Self {
        Self {
            tensors: ps
                .iter()
                .map(|(_, p)| (p.name().to_string(), p.value().clone()))
                .collect(),
        }
    }

    /// Copy every stored tensor into `ps`. Names that are neither parameters
    /// nor listed in `extra` are rejected, as are parameters absent from the
    /// checkpoint. Nothing is written unless the whole checkpoint fits.
    pub fn load_into(&self, ps: &mut ParamStore<f32>, extra: &[&str]) -> Result<()> {
        let unknown: Vec<String> = self
            .names()
            .filter(|n| ps.id(n).is_none() && !extra.contains(n))
            .map(str::to_string)
            .collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownTensors(unknown));
        }
        let present: BTreeSet<&str> = self.names().collect();
        let missing: Vec<&str> = ps.names().filter(|n| !present.contains(n)).collect();
        if !missing.is_empty() {
            return Err(Error::invalid(format!(
                "checkpoint lacks parameters {missing:?}"
            )));
        }
        for (name, t) in &self.tensors {
            if let Some(id) = ps.id(name) {
                if ps.value(id).shape() != t.shape() {
                    return Err(Error::shape(
                        "checkpoint load",
                        ps.value(id).shape(),
                        t.shape(),
                    ));
                }
            }
        }
        for (name, t) in &self.tensors {
            if let Some(id) = ps.id(name) {
                *ps.value_mut(id) = t.clone();
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut body = Vec::new();
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len())
                .map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
            let ndim = u8::try_from(t.ndim())
                .map_err(|_| Error::invalid(format!("too many dims in {name}")))?;
            body.extend_from_slice(&len.to_le_bytes());
            body.extend_from_slice(nb);
            body.push(ndim);
            for &d in t.shape() {
                body.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(body.len() + 16);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing MSNC header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                what: "checkpoint",
                found: version,
                expected: VERSION,
            });
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(corrupt("CRC mismatch".into()));
        }

        let mut cur = Cursor {
            buf: body,
            pos: 0,
            path,
        };
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = cur.take(1)?[0] as usize;
            let shape: Vec<usize> = (0..ndim)
                .map(|_| {
                    cur.take(4)
                        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                })
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let data = cur
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if cur.pos != body.len() {
            return Err(corrupt("trailing bytes after last record".into()));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt {
                path: self.path.to_path_buf(),
                reason: "record runs past end of file".into(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}
