//! Binary checkpoint container shared by all three model kinds.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "CCKP" version
//! n_meta  { key_len key  value_len value }*
//! n_tensor { name_len name  ndim dim*  f32[prod(dim)] }*
//! ```
//!
//! Metadata always carries `kind` (`drm`, `dam` or `dcm`), the kernel plan
//! and its hash; training code adds `seed` and `epoch`/`step`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{encoder_hash, CriticArch, DamParams, DcmParams, Decoder, DrmArch, DrmParams, Encoder, ParamSet};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"CCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Drm,
    Dam,
    Dcm,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Drm => "drm",
            ModelKind::Dam => "dam",
            ModelKind::Dcm => "dcm",
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_kernels<const N: usize>(s: &str) -> Option<[usize; N]> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    v.try_into().ok()
}

impl Checkpoint {
    pub fn from_params<T: Scalar, P: ParamSet<T>>(params: &P) -> Self {
        let tensors = params
            .named()
            .into_iter()
            .map(|(name, shape, data)| NamedTensor {
                name,
                shape,
                data: data.iter().map(|v| v.to_f64c() as f32).collect(),
            })
            .collect();
        Self {
            meta: BTreeMap::new(),
            tensors,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get("kind").map(String::as_str)
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    /// Copies tensors into `params` by name, checking every shape.
    pub fn load_into<T: Scalar, P: ParamSet<T>>(&self, params: &mut P, path: &Path) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = params.named().into_iter().map(|(n, s, _)| (n, s)).collect();
        let mut slots = params.slices_mut();
        for ((name, shape), slot) in expected.iter().zip(slots.iter_mut()) {
            let t = self
                .tensors
                .iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
            if &t.shape != shape {
                return Err(Error::format(
                    path,
                    format!("tensor {name}: shape {:?}, expected {shape:?}", t.shape),
                ));
            }
            for (d, &s) in slot.iter_mut().zip(&t.data) {
                *d = T::lit(s as f64);
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            put_u32(&mut out, t.shape.len() as u32);
            for &d in &t.shape {
                put_u32(&mut out, d as u32);
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let n = r.u32()?;
        let mut tensors = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = r
                .take(4 * len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last tensor"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_bytes(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&super::read_bytes(path)?, path)
    }

    fn require_kind(&self, allowed: &[ModelKind], path: &Path) -> Result<ModelKind> {
        let k = self
            .kind()
            .ok_or_else(|| Error::format(path, "checkpoint has no kind"))?;
        allowed
            .iter()
            .copied()
            .find(|a| a.as_str() == k)
            .ok_or_else(|| Error::format(path, format!("checkpoint kind {k} not usable here")))
    }

    fn kernels<const N: usize>(&self, key: &str, path: &Path) -> Result<[usize; N]> {
        self.meta_value(key)
            .and_then(parse_kernels::<N>)
            .ok_or_else(|| Error::format(path, format!("missing or malformed `{key}` metadata")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::format(self.path, "truncated checkpoint")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "non-UTF-8 string"))
    }
}

pub fn drm_checkpoint<T: Scalar>(params: &DrmParams<T>) -> Checkpoint {
    let arch = params.arch();
    Checkpoint::from_params(params)
        .with_meta("kind", ModelKind::Drm.as_str())
        .with_meta("encoder_kernels", join(&arch.encoder))
        .with_meta("decoder_kernels", join(&arch.decoder))
        .with_meta("arch_hash", arch.hash())
}

pub fn dam_checkpoint<T: Scalar>(params: &DamParams<T>) -> Checkpoint {
    let enc = params.encoder.kernels();
    Checkpoint::from_params(params)
        .with_meta("kind", ModelKind::Dam.as_str())
        .with_meta("encoder_kernels", join(&enc))
        .with_meta("arch_hash", encoder_hash(enc))
}

pub fn dcm_checkpoint<T: Scalar>(params: &DcmParams<T>) -> Checkpoint {
    let a = params.arch();
    Checkpoint::from_params(params)
        .with_meta("kind", ModelKind::Dcm.as_str())
        .with_meta(
            "critic_shape",
            join(&[a.feature_channels, a.conv[0], a.conv[1], a.hidden]),
        )
        .with_meta("dropout", a.dropout)
        .with_meta("arch_hash", a.hash())
}

pub fn load_drm<T: Scalar>(path: &Path) -> Result<DrmParams<T>> {
    let ck = Checkpoint::load(path)?;
    ck.require_kind(&[ModelKind::Drm], path)?;
    let arch = DrmArch {
        encoder: ck.kernels("encoder_kernels", path)?,
        decoder: ck.kernels("decoder_kernels", path)?,
    };
    arch.validate()?;
    let mut p = DrmParams::zeros(arch);
    ck.load_into(&mut p, path)?;
    Ok(p)
}

/// Loads the encoder half of a DRM checkpoint, or a DAM checkpoint.
pub fn load_encoder<T: Scalar>(path: &Path) -> Result<Encoder<T>> {
    let ck = Checkpoint::load(path)?;
    ck.require_kind(&[ModelKind::Drm, ModelKind::Dam], path)?;
    let mut enc = Encoder::zeros(ck.kernels("encoder_kernels", path)?);
    ck.load_into(&mut enc, path)?;
    Ok(enc)
}

pub fn load_dam<T: Scalar>(path: &Path) -> Result<DamParams<T>> {
    let ck = Checkpoint::load(path)?;
    ck.require_kind(&[ModelKind::Dam], path)?;
    let mut dam = DamParams {
        encoder: Encoder::zeros(ck.kernels("encoder_kernels", path)?),
    };
    ck.load_into(&mut dam, path)?;
    Ok(dam)
}

/// Loads the decoder half of a DRM checkpoint.
pub fn load_decoder<T: Scalar>(path: &Path) -> Result<Decoder<T>> {
    Ok(load_drm::<T>(path)?.decoder)
}

pub fn load_dcm<T: Scalar>(path: &Path) -> Result<DcmParams<T>> {
    let ck = Checkpoint::load(path)?;
    ck.require_kind(&[ModelKind::Dcm], path)?;
    let [f, c1, c2, h] = ck.kernels::<4>("critic_shape", path)?;
    let dropout = ck
        .meta_value("dropout")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| Error::format(path, "missing dropout metadata"))?;
    let mut dcm = DcmParams::zeros(CriticArch {
        feature_channels: f,
        conv: [c1, c2],
        hidden: h,
        dropout,
    });
    ck.load_into(&mut dcm, path)?;
    Ok(dcm)
}
