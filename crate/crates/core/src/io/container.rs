//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VILS" | version u32 | entry count u32 |
//! per entry: name length u16 | name UTF-8 | dtype u8 | rank u8 |
//!            extents u64 × rank | payload
//! ```
//!
//! dtype codes: 0 f32, 1 f64, 2 u8, 3 u32, 4 i64. Floats are stored by bit
//! pattern, so every value (including NaN payloads) round-trips exactly.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"VILS";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed container: {0}")]
    Format(String),
    #[error("missing entries: {}", .0.join(", "))]
    Missing(Vec<String>),
}

pub type Result<T> = std::result::Result<T, ContainerError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U32(Vec<u32>),
    I64(Vec<i64>),
}

impl Payload {
    pub fn code(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::F64(_) => 1,
            Payload::U8(_) => 2,
            Payload::U32(_) => 3,
            Payload::I64(_) => 4,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::U32(v) => v.len(),
            Payload::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            Payload::F32(v) => v.iter().for_each(|x| out.extend(x.to_bits().to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend(x.to_bits().to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
            Payload::U32(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
            Payload::I64(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

/// Ordered, uniquely named entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    entries: Vec<Entry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            ContainerError::Format(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice length"))
    }
}

fn chunks<const N: usize, T>(bytes: &[u8], f: impl Fn([u8; N]) -> T) -> Vec<T> {
    bytes.chunks_exact(N).map(|c| f(c.try_into().expect("chunk"))).collect()
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Adds or replaces an entry. Panics if the shape does not match the
    /// payload length.
    pub fn put(&mut self, name: impl Into<String>, shape: Vec<usize>, payload: Payload) {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), payload.len(), "entry {name}: shape/payload mismatch");
        assert!(name.len() <= u16::MAX as usize, "entry name too long");
        let e = Entry { name, shape, payload };
        match self.entries.iter_mut().find(|x| x.name == e.name) {
            Some(slot) => *slot = e,
            None => self.entries.push(e),
        }
    }

    pub fn put_tensor<T: Float>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let payload = match T::DTYPE {
            crate::tensor::DType::F32 => Payload::F32(t.data().iter().map(|x| x.as_f64() as f32).collect()),
            crate::tensor::DType::F64 => Payload::F64(t.data().iter().map(|x| x.as_f64()).collect()),
        };
        self.put(name, t.shape().to_vec(), payload);
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Entry> {
        let i = self.entries.iter().position(|e| e.name == name)?;
        Some(self.entries.remove(i))
    }

    pub fn require(&self, names: &[String]) -> Result<()> {
        let missing: Vec<String> = names.iter().filter(|n| self.get(n).is_none()).cloned().collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(ContainerError::Missing(missing))
        }
    }

    /// A float entry as a tensor of `T` (f32 and f64 entries are accepted).
    pub fn tensor<T: Float>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.get(name).ok_or_else(|| ContainerError::Missing(vec![name.to_string()]))?;
        let data: Vec<T> = match &e.payload {
            Payload::F32(v) => v.iter().map(|&x| T::lit(f64::from(x))).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
            _ => return Err(ContainerError::Format(format!("entry {name} is not a float tensor"))),
        };
        let shape = if e.shape.is_empty() { vec![1] } else { e.shape.clone() };
        Tensor::new(shape, data).map_err(|err| ContainerError::Format(format!("entry {name}: {err}")))
    }

    pub fn bytes(&self, name: &str) -> Result<(&[usize], &[u8])> {
        match self.get(name) {
            Some(Entry { shape, payload: Payload::U8(v), .. }) => Ok((shape, v)),
            Some(_) => Err(ContainerError::Format(format!("entry {name} is not u8"))),
            None => Err(ContainerError::Missing(vec![name.to_string()])),
        }
    }

    pub fn floats32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        match self.get(name) {
            Some(Entry { shape, payload: Payload::F32(v), .. }) => Ok((shape, v)),
            Some(_) => Err(ContainerError::Format(format!("entry {name} is not f32"))),
            None => Err(ContainerError::Missing(vec![name.to_string()])),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<&[u32]> {
        match self.get(name) {
            Some(Entry { payload: Payload::U32(v), .. }) => Ok(v),
            Some(_) => Err(ContainerError::Format(format!("entry {name} is not u32"))),
            None => Err(ContainerError::Missing(vec![name.to_string()])),
        }
    }

    pub fn i64s(&self, name: &str) -> Result<&[i64]> {
        match self.get(name) {
            Some(Entry { payload: Payload::I64(v), .. }) => Ok(v),
            Some(_) => Err(ContainerError::Format(format!("entry {name} is not i64"))),
            None => Err(ContainerError::Missing(vec![name.to_string()])),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend((e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.payload.code());
            out.push(e.shape.len() as u8);
            for &x in &e.shape {
                out.extend((x as u64).to_le_bytes());
            }
            e.payload.write(&mut out);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ContainerError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(ContainerError::Format(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| ContainerError::Format("entry name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(ContainerError::Format(format!("duplicate entry {name}")));
            }
            let code = r.array::<1>()?[0];
            let rank = r.array::<1>()?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(u64::from_le_bytes(r.array()?)).map_err(|_| {
                    ContainerError::Format(format!("entry {name}: extent too large"))
                })?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &x| a.checked_mul(x))
                .ok_or_else(|| ContainerError::Format(format!("entry {name}: size overflow")))?;
            let width = match code {
                0 => 4,
                1 => 8,
                2 => 1,
                3 => 4,
                4 => 8,
                c => return Err(ContainerError::Format(format!("entry {name}: unknown dtype {c}"))),
            };
            let bytes = r.take(n.checked_mul(width).ok_or_else(|| ContainerError::Format("size overflow".into()))?)?;
            let payload = match code {
                0 => Payload::F32(chunks(bytes, |b| f32::from_bits(u32::from_le_bytes(b)))),
                1 => Payload::F64(chunks(bytes, |b| f64::from_bits(u64::from_le_bytes(b)))),
                2 => Payload::U8(bytes.to_vec()),
                3 => Payload::U32(chunks(bytes, u32::from_le_bytes)),
                _ => Payload::I64(chunks(bytes, i64::from_le_bytes)),
            };
            entries.push(Entry { name, shape, payload });
        }
        if r.pos != buf.len() {
            return Err(ContainerError::Format(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| ContainerError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|source| ContainerError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&buf)
    }
}
