//! `.otar` archives: named f32 tensors behind a JSON header.
//!
//! Layout: `"OTAR"` | version `u32` LE | header length `u64` LE | header |
//! payload. The header is a UTF-8 JSON array of
//! `{name, dtype, shape, offset, nbytes}` with offsets counted from the
//! start of the payload. Each entry starts on an 8-byte boundary, and the
//! header is padded with trailing spaces so the payload does too.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposition::{ConvTt, CpFactors, KernelFactors};
use crate::tensor::{ConvKernel, DenseTensor, TensorShape};

pub const MAGIC: &[u8; 4] = b"OTAR";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;
const ALIGN: usize = 8;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("bad magic bytes {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated header: need {needed} bytes, stream has {available}")]
    TruncatedHeader { needed: u64, available: u64 },
    #[error("truncated payload: entry {name:?} ends at byte {end}, payload has {available}")]
    TruncatedPayload { name: String, end: u64, available: u64 },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {0:?} holds values that are not finite in f32")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    tensors: Vec<(String, DenseTensor)>,
}

fn aligned(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(tensors: Vec<(String, DenseTensor)>) -> Result<Self, ArchiveError> {
        let mut a = Self::new();
        for (name, t) in tensors {
            a.push(name, t)?;
        }
        Ok(a)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: DenseTensor) -> Result<(), ArchiveError> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(ArchiveError::DuplicateName(name));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseTensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn into_tensors(self) -> Vec<(String, DenseTensor)> {
        self.tensors
    }

    /// Header entries in the order they are written.
    pub fn entries(&self) -> Vec<ArchiveEntry> {
        let mut offset = 0usize;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let nbytes = 4 * t.numel();
                let e = ArchiveEntry {
                    name: name.clone(),
                    dtype: "f32".into(),
                    shape: t.dims().to_vec(),
                    offset: offset as u64,
                    nbytes: nbytes as u64,
                };
                offset = aligned(offset + nbytes);
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ArchiveError> {
        let entries = self.entries();
        let mut header = serde_json::to_vec(&entries).expect("header serializes");
        header.resize(aligned(PREAMBLE + header.len()) - PREAMBLE, b' ');
        let payload_len = entries.last().map_or(0, |e| aligned((e.offset + e.nbytes) as usize));

        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let base = out.len();
        for ((name, t), e) in self.tensors.iter().zip(&entries) {
            out.resize(base + e.offset as usize, 0);
            for &v in t.data() {
                let x = v as f32;
                if !x.is_finite() {
                    return Err(ArchiveError::NonFinite(name.clone()));
                }
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.resize(base + payload_len, 0);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(ArchiveError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
        }
        if bytes.len() < PREAMBLE {
            return Err(ArchiveError::TruncatedHeader { needed: PREAMBLE as u64, available: bytes.len() as u64 });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(ArchiveError::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = (PREAMBLE as u64).checked_add(header_len).filter(|&e| e <= bytes.len() as u64).ok_or(
            ArchiveError::TruncatedHeader {
                needed: (PREAMBLE as u64).saturating_add(header_len),
                available: bytes.len() as u64,
            },
        )? as usize;
        let entries: Vec<ArchiveEntry> = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| ArchiveError::MalformedHeader(e.to_string()))?;
        let payload = &bytes[header_end..];

        let mut names = HashSet::new();
        let mut spans = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for e in entries {
            if !names.insert(e.name.clone()) {
                return Err(ArchiveError::DuplicateName(e.name));
            }
            if e.dtype != "f32" {
                return Err(ArchiveError::MalformedHeader(format!("entry {:?} has dtype {:?}", e.name, e.dtype)));
            }
            let shape = TensorShape::new(e.shape.clone())
                .map_err(|err| ArchiveError::MalformedHeader(format!("entry {:?}: {err}", e.name)))?;
            let expected = shape.numel().checked_mul(4).map(|n| n as u64);
            if expected != Some(e.nbytes) {
                return Err(ArchiveError::MalformedHeader(format!(
                    "entry {:?} declares {} bytes for shape {:?}",
                    e.name, e.nbytes, e.shape
                )));
            }
            let end = e.offset.checked_add(e.nbytes).ok_or_else(|| {
                ArchiveError::MalformedHeader(format!("entry {:?} offset overflows", e.name))
            })?;
            if end > payload.len() as u64 {
                return Err(ArchiveError::TruncatedPayload { name: e.name, end, available: payload.len() as u64 });
            }
            spans.push((e.offset, end, e.name.clone()));
            let data = payload[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect::<Vec<_>>();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(ArchiveError::NonFinite(e.name));
            }
            let t = DenseTensor::new(e.shape, data).map_err(|err| ArchiveError::MalformedHeader(err.to_string()))?;
            tensors.push((e.name, t));
        }
        spans.sort();
        if let Some(w) = spans.windows(2).find(|w| w[1].0 < w[0].1) {
            return Err(ArchiveError::MalformedHeader(format!("entries {:?} and {:?} overlap", w[0].2, w[1].2)));
        }
        Ok(Self { tensors })
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self, ArchiveError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<(), ArchiveError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

pub fn write_archive(tensors: &[(String, DenseTensor)]) -> Result<Vec<u8>, ArchiveError> {
    Archive::from_tensors(tensors.to_vec())?.to_bytes()
}

pub fn read_archive(bytes: &[u8]) -> Result<Vec<(String, DenseTensor)>, ArchiveError> {
    Ok(Archive::from_bytes(bytes)?.into_tensors())
}

/// Conv layers of a model archive: every 4-way entry, in archive order.
pub fn conv_layers(archive: &Archive) -> Vec<(String, ConvKernel)> {
    archive
        .iter()
        .filter(|(_, t)| t.order() == 4)
        .map(|(n, t)| (n.to_string(), ConvKernel::new(t.clone()).expect("4-way tensor")))
        .collect()
}

/// Names `layer{i}.factor{n}` for CP factors `(I_n, R)` and `layer{i}.core{k}`
/// for the TT cores `(O, R1)`, `(R1, k1, k2, R2)`, `(C, R2)`.
pub fn factors_to_archive(layers: &[KernelFactors]) -> Archive {
    let mut out = Archive::new();
    for (i, f) in layers.iter().enumerate() {
        match f {
            KernelFactors::Cp(cp) => {
                for (n, (m, &d)) in cp.factors().iter().zip(cp.dims()).enumerate() {
                    let t = DenseTensor::new(vec![d, cp.rank()], m.clone()).expect("factor shape");
                    out.push(format!("layer{i}.factor{n}"), t).expect("fresh name");
                }
            }
            KernelFactors::Tt(tt) => {
                for (k, t) in [tt.out_core(), tt.spatial_core(), tt.in_core()].into_iter().enumerate() {
                    out.push(format!("layer{i}.core{k}"), t).expect("fresh name");
                }
            }
        }
    }
    out
}

/// Inverse of [`factors_to_archive`].
pub fn factors_from_archive(archive: &Archive) -> Result<Vec<KernelFactors>, ArchiveError> {
    let bad = |msg: String| ArchiveError::MalformedHeader(msg);
    let mut layers = Vec::new();
    for i in 0.. {
        let factors: Vec<&DenseTensor> =
            (0..4).map_while(|n| archive.get(&format!("layer{i}.factor{n}"))).collect();
        let cores: Vec<&DenseTensor> = (0..3).map_while(|k| archive.get(&format!("layer{i}.core{k}"))).collect();
        let layer = match (factors.len(), cores.len()) {
            (0, 0) => break,
            (4, 0) => {
                let rank = factors[0].dims().get(1).copied().unwrap_or(0);
                let mut dims = Vec::with_capacity(4);
                let mut blocks = Vec::with_capacity(4);
                for (n, t) in factors.iter().enumerate() {
                    if t.order() != 2 || t.dims()[1] != rank {
                        return Err(bad(format!("layer{i}.factor{n} has shape {:?}", t.dims())));
                    }
                    dims.push(t.dims()[0]);
                    blocks.push(t.data().to_vec());
                }
                KernelFactors::Cp(CpFactors::new(dims, rank, blocks).map_err(|e| bad(format!("layer{i}: {e}")))?)
            }
            (0, 3) => KernelFactors::Tt(
                ConvTt::from_cores(cores[0], cores[1], cores[2]).map_err(|e| bad(format!("layer{i}: {e}")))?,
            ),
            _ => return Err(bad(format!("layer{i} has an incomplete factor set"))),
        };
        layers.push(layer);
    }
    let known = layers
        .iter()
        .map(|l| if l.kind() == crate::decomposition::DecompKind::Cp { 4 } else { 3 })
        .sum::<usize>();
    if known != archive.len() {
        return Err(bad("archive has entries outside the layer sequence".into()));
    }
    Ok(layers)
}
