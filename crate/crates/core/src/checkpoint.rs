//! Named-tensor container with a trailing CRC32.
//!
//! ```text
//! "SPNC" | u32 version=1 | u32 count
//! per tensor: u16 name_len | name | u8 dtype | u8 rank | rank × u32 dims | payload
//! u32 CRC32 of every preceding byte
//! ```
//!
//! All integers and scalars are little-endian. The same container stores
//! model weights and ingested image archives.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Parameterized;
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"SPNC";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            AnyTensor::F32(t) => t.to_le_bytes(),
            AnyTensor::F64(t) => t.to_le_bytes(),
        }
    }

    /// Value converted to `T`; exact when the stored dtype is `T`.
    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub trait IntoAny {
    fn into_any(self) -> AnyTensor;
}

impl IntoAny for Tensor<f32> {
    fn into_any(self) -> AnyTensor {
        AnyTensor::F32(self)
    }
}

impl IntoAny for Tensor<f64> {
    fn into_any(self) -> AnyTensor {
        AnyTensor::F64(self)
    }
}

/// Ordered, uniquely named tensors.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    entries: Vec<(String, AnyTensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: impl IntoAny) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Format("tensor name longer than 65535 bytes".into()));
        }
        self.entries.push((name, tensor.into_any()));
        Ok(())
    }

    /// Every parameter of `model` under its own name.
    pub fn from_model<T: Scalar, M: Parameterized<T> + ?Sized>(model: &M) -> Result<Self>
    where
        Tensor<T>: IntoAny,
    {
        let mut ck = Checkpoint::new();
        let mut result = Ok(());
        model.visit_params(&mut |name, t| {
            let mut t = t.clone();
            t.set_requires_grad(false);
            if result.is_ok() {
                result = ck.insert(name, t);
            }
        });
        result.map(|_| ck)
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_as<T: Scalar>(&self, name: &str) -> Option<Tensor<T>> {
        self.get(name).map(AnyTensor::to)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> &[(String, AnyTensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose names start with `prefix`, in order.
    pub fn filtered(&self, prefix: &str) -> Checkpoint {
        Checkpoint {
            entries: self
                .entries
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .cloned()
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&t.payload());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// CRC32 over the encoded body, as stored in the trailer.
    pub fn crc(&self) -> u32 {
        let bytes = self.encode();
        u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("checkpoint shorter than header and trailer".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        if &body[..4] != MAGIC {
            return Err(Error::Format("checkpoint magic is not SPNC".into()));
        }
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Integrity(format!(
                "checkpoint CRC mismatch (stored {stored:08x}, computed {actual:08x})"
            )));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let count = r.u32()?;
        let mut seen = HashSet::new();
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor name {name:?}")));
            }
            let code = r.u8()?;
            let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code} for {name}")))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * dtype.size())?;
            let tensor = match dtype {
                DType::F32 => AnyTensor::F32(Tensor::new(shape, payload.chunks_exact(4).map(f32::read_le).collect())?),
                DType::F64 => AnyTensor::F64(Tensor::new(shape, payload.chunks_exact(8).map(f64::read_le).collect())?),
            };
            ck.entries.push((name, tensor));
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes after last tensor", body.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
