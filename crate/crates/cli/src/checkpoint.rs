//! Binary checkpoint format.
//!
//! ```text
//! "SBCK"  u32 version  u32 meta_len  meta (JSON)  u32 n_tensors
//! per tensor: u16 name_len  name  u8 dtype  u8 rank  u32 dims[rank]
//!             u32 crc32(payload)  payload (little-endian)
//! ```
//!
//! Model components are stored as f32. Resume state is stored as f64 so a
//! resumed run continues bit-for-bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use sbrush_core::nets::{NetConfig, ParamSet};
use sbrush_core::schedule::ScheduleSpec;
use sbrush_core::teacher::GmmSpec;
use sbrush_core::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SBCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {found} (this build reads version {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("checksum mismatch in tensor '{0}'")]
    Checksum(String),
    #[error("bad checkpoint metadata: {0}")]
    Meta(String),
    #[error("malformed tensor '{name}': {reason}")]
    Malformed { name: String, reason: String },
    #[error("expected a {expected} checkpoint, found {found}")]
    Component { expected: String, found: Component },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Teacher,
    Student,
    StudentEma,
    Lora,
    /// Everything needed to continue a distillation run.
    Resume,
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Component::Teacher => "teacher",
            Component::Student => "student",
            Component::StudentEma => "student_ema",
            Component::Lora => "lora",
            Component::Resume => "resume",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraMeta {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub component: Component,
    pub config_hash: String,
    pub iteration: usize,
    pub schedule: ScheduleSpec,
    pub net: NetConfig,
    /// Closed-form prior added to the network output, if any.
    pub gmm_prior: Option<GmmSpec>,
    pub parameterize: Option<bool>,
    pub lora: Option<LoraMeta>,
    pub ema_decay: Option<f64>,
    /// Component-specific state (RNG positions, optimizer step counts).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub dtype: Dtype,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, dtype: Dtype) -> Self {
        Self {
            meta,
            dtype,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.detach()));
    }

    /// Adds every tensor of `params` as `<prefix><name>`.
    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (k, t) in params.iter() {
            self.push(format!("{prefix}{k}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(k, _)| k == name).map(|(_, t)| t)
    }

    /// Tensors named `<prefix>...` as a parameter set with the prefix removed.
    pub fn params(&self, prefix: &str) -> ParamSet {
        let mut p = ParamSet::new();
        for (k, t) in &self.tensors {
            if let Some(name) = k.strip_prefix(prefix) {
                p.insert(name, t.clone());
            }
        }
        p
    }

    pub fn expect(&self, component: Component) -> Result<(), CheckpointError> {
        if self.meta.component != component {
            return Err(CheckpointError::Component {
                expected: component.to_string(),
                found: self.meta.component,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("metadata always serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(self.dtype.tag());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let payload: Vec<u8> = match self.dtype {
                Dtype::F32 => t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
                Dtype::F64 => t.data().iter().flat_map(|&v| v.to_le_bytes()).collect(),
            };
            out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        let n = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(n.min(4096));
        let mut dtype = None;
        for i in 0..n {
            let what = format!("tensor #{i}");
            let name_len = u16::from_le_bytes(r.take(2, &what)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(name_len, &what)?.to_vec()).map_err(|_| CheckpointError::Malformed {
                name: what.clone(),
                reason: "name is not UTF-8".into(),
            })?;
            let malformed = |reason: &str| CheckpointError::Malformed {
                name: name.clone(),
                reason: reason.into(),
            };
            let dt = Dtype::from_tag(r.take(1, &name)?[0]).ok_or_else(|| malformed("unknown dtype"))?;
            if *dtype.get_or_insert(dt) != dt {
                return Err(malformed("mixed dtypes in one checkpoint"));
            }
            let rank = r.take(1, &name)?[0] as usize;
            let dims = (0..rank)
                .map(|_| r.u32(&name).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            if dims.contains(&0) {
                return Err(malformed("zero-sized dimension"));
            }
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| malformed("shape overflows"))?;
            let crc = r.u32(&name)?;
            let payload = r.take(count * dt.width(), &name)?;
            if crc32fast::hash(payload) != crc {
                return Err(CheckpointError::Checksum(name));
            }
            let data: Vec<f64> = match dt {
                Dtype::F32 => payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                Dtype::F64 => payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            let t = Tensor::new(dims, data).map_err(|e| malformed(&e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed {
                name: "<file>".into(),
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self {
            meta,
            dtype: dtype.unwrap_or(Dtype::F32),
            tensors,
        })
    }

    /// Writes to a sibling temp file first so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("sbck.tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dtype: Dtype) -> Checkpoint {
        let meta = CheckpointMeta {
            component: Component::Teacher,
            config_hash: "abc".into(),
            iteration: 7,
            schedule: ScheduleSpec::default(),
            net: NetConfig::default(),
            gmm_prior: Some(GmmSpec::reference()),
            parameterize: None,
            lora: None,
            ema_decay: None,
            extra: serde_json::json!({"k": 1}),
        };
        let mut c = Checkpoint::new(meta, dtype);
        c.push("w", &Tensor::from_vec(&[2, 3], vec![0.1, -2.5, 3.0, 1e-7, 0.0, 7.25]));
        c.push("b", &Tensor::vector(vec![std::f64::consts::PI]));
        c
    }

    #[test]
    fn f32_round_trip_is_bit_exact_at_f32() {
        let c = sample(Dtype::F32);
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, c.meta);
        for ((ka, a), (kb, b)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(ka, kb);
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits());
            }
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let c = sample(Dtype::F64);
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample(Dtype::F32).to_bytes();
        for cut in 0..bytes.len() {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn header_gates() {
        let mut bytes = sample(Dtype::F32).to_bytes();
        bytes[4] = 2;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("unsupported version"), "{err}");
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic(_))));
    }

    #[test]
    fn corrupted_payload_names_the_tensor() {
        let mut bytes = sample(Dtype::F32).to_bytes();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        match Checkpoint::from_bytes(&bytes) {
            Err(CheckpointError::Checksum(name)) => assert_eq!(name, "b"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn component_guard() {
        let c = sample(Dtype::F32);
        assert!(c.expect(Component::Teacher).is_ok());
        let err = c.expect(Component::Student).unwrap_err();
        assert_eq!(err.to_string(), "expected a student checkpoint, found teacher");
    }
}
