//! Per-timestep, per-site store of projected self-attention tensors captured
//! while inverting the reference, colour and contour images.
//!
//! Tensors are kept as 32-bit floats, `heads × tokens × head_dim`. A bank is
//! written by one inversion and read-only afterwards.
//!
//! Cache layout (little-endian):
//!
//! ```text
//! "MSAB" | version u8
//! schedule hash [32] | site count u32 | (index u32, stage u8)* | source hash [32]
//! record count u64
//! per record: byte length u32 | timestep u32 | site index u32 | stage u8 | kind u8 | source u8
//!             | heads u32 | tokens u32 | dim u32 | f32 data
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{AttentionController, AttentionOverride, AttentionSiteId, ControllerError, Qkv, Stage};
use crate::ddim::ScheduleHash;

const MAGIC: &[u8; 4] = b"MSAB";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("duplicate bank entry {0}")]
    DuplicateKey(BankKey),
    #[error("missing bank entry {0}")]
    MissingKey(BankKey),
    #[error("tensor layout {actual:?} at site {site} differs from earlier layout {expected:?}")]
    LayoutMismatch {
        site: AttentionSiteId,
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },
    #[error("corrupt bank header: {0}")]
    CorruptHeader(String),
    #[error("bank built under schedule {found}, consumer expects {expected}")]
    HashMismatch {
        expected: ScheduleHash,
        found: ScheduleHash,
    },
    #[error("bank cache io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TensorKind {
    Q,
    K,
    V,
}

impl TensorKind {
    fn code(self) -> u8 {
        match self {
            TensorKind::Q => 0,
            TensorKind::K => 1,
            TensorKind::V => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [TensorKind::Q, TensorKind::K, TensorKind::V].into_iter().find(|k| k.code() == c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankSource {
    Reference,
    Color,
    Contour,
}

impl BankSource {
    fn code(self) -> u8 {
        match self {
            BankSource::Reference => 0,
            BankSource::Color => 1,
            BankSource::Contour => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [BankSource::Reference, BankSource::Color, BankSource::Contour]
            .into_iter()
            .find(|s| s.code() == c)
    }

    /// Tensor kinds the pipeline captures for this source.
    pub fn captured_kinds(self) -> &'static [TensorKind] {
        match self {
            BankSource::Reference => &[TensorKind::Q, TensorKind::K, TensorKind::V],
            BankSource::Color | BankSource::Contour => &[TensorKind::Q],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BankKey {
    pub timestep: usize,
    pub site: AttentionSiteId,
    pub kind: TensorKind,
    pub source: BankSource,
}

impl BankKey {
    pub fn new(timestep: usize, site: AttentionSiteId, kind: TensorKind, source: BankSource) -> Self {
        Self {
            timestep,
            site,
            kind,
            source,
        }
    }
}

impl fmt::Display for BankKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(t={}, site={}, {:?}, {:?})",
            self.timestep, self.site, self.kind, self.source
        )
    }
}

/// `heads × tokens × dim` matrix stored in single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct BankTensor {
    pub heads: usize,
    pub tokens: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl BankTensor {
    pub fn from_array(a: &Array3<f64>) -> Self {
        let (heads, tokens, dim) = a.dim();
        Self {
            heads,
            tokens,
            dim,
            data: a.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_array(&self) -> Array3<f64> {
        Array3::from_shape_vec(
            (self.heads, self.tokens, self.dim),
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("tensor data matches its layout")
    }

    pub fn layout(&self) -> (usize, usize, usize) {
        (self.heads, self.tokens, self.dim)
    }

    fn bit_eq(&self, other: &BankTensor) -> bool {
        self.layout() == other.layout()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankMeta {
    pub schedule_hash: ScheduleHash,
    pub sites: Vec<AttentionSiteId>,
    pub source_hash: [u8; 32],
}

#[derive(Clone, Debug)]
pub struct AttentionBank {
    meta: BankMeta,
    entries: BTreeMap<BankKey, BankTensor>,
}

impl PartialEq for AttentionBank {
    fn eq(&self, other: &Self) -> bool {
        self.meta == other.meta
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, ta), (kb, tb))| ka == kb && ta.bit_eq(tb))
    }
}

impl AttentionBank {
    pub fn new(meta: BankMeta) -> Self {
        Self {
            meta,
            entries: BTreeMap::new(),
        }
    }

    pub fn meta(&self) -> &BankMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &BankKey> {
        self.entries.keys()
    }

    pub fn count_kind(&self, kind: TensorKind) -> usize {
        self.entries.keys().filter(|k| k.kind == kind).count()
    }

    pub fn record(&mut self, key: BankKey, tensor: BankTensor) -> Result<(), BankError> {
        if self.entries.contains_key(&key) {
            return Err(BankError::DuplicateKey(key));
        }
        if let Some((_, other)) = self.entries.iter().find(|(k, _)| k.site == key.site) {
            if other.layout() != tensor.layout() {
                return Err(BankError::LayoutMismatch {
                    site: key.site,
                    expected: other.layout(),
                    actual: tensor.layout(),
                });
            }
        }
        self.entries.insert(key, tensor);
        Ok(())
    }

    pub fn lookup(&self, key: &BankKey) -> Result<&BankTensor, BankError> {
        self.entries.get(key).ok_or(BankError::MissingKey(*key))
    }

    pub fn verify_schedule(&self, expected: &ScheduleHash) -> Result<(), BankError> {
        if &self.meta.schedule_hash == expected {
            Ok(())
        } else {
            Err(BankError::HashMismatch {
                expected: *expected,
                found: self.meta.schedule_hash,
            })
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.extend_from_slice(&self.meta.schedule_hash.0);
        buf.extend_from_slice(&(self.meta.sites.len() as u32).to_le_bytes());
        for s in &self.meta.sites {
            buf.extend_from_slice(&(s.index as u32).to_le_bytes());
            buf.push(s.stage.code());
        }
        buf.extend_from_slice(&self.meta.source_hash);
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (k, t) in &self.entries {
            let len = 4 + 4 + 1 + 1 + 1 + 12 + 4 * t.data.len();
            buf.extend_from_slice(&(len as u32).to_le_bytes());
            buf.extend_from_slice(&(k.timestep as u32).to_le_bytes());
            buf.extend_from_slice(&(k.site.index as u32).to_le_bytes());
            buf.push(k.site.stage.code());
            buf.push(k.kind.code());
            buf.push(k.source.code());
            for d in [t.heads, t.tokens, t.dim] {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BankError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(BankError::CorruptHeader("bad magic".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(BankError::CorruptHeader(format!("unsupported version {version}")));
        }
        let schedule_hash = ScheduleHash(r.take(32)?.try_into().expect("32 bytes"));
        let n_sites = r.u32()? as usize;
        let mut sites = Vec::with_capacity(n_sites.min(4096));
        for _ in 0..n_sites {
            sites.push(r.site()?);
        }
        let source_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let n_records = r.u64()?;
        let mut bank = AttentionBank::new(BankMeta {
            schedule_hash,
            sites,
            source_hash,
        });
        for _ in 0..n_records {
            let len = r.u32()? as usize;
            let start = r.pos;
            let timestep = r.u32()? as usize;
            let site = r.site()?;
            let kind = TensorKind::from_code(r.u8()?)
                .ok_or_else(|| BankError::CorruptHeader("bad tensor kind".into()))?;
            let source = BankSource::from_code(r.u8()?)
                .ok_or_else(|| BankError::CorruptHeader("bad source".into()))?;
            let (heads, tokens, dim) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            let n = heads
                .checked_mul(tokens)
                .and_then(|v| v.checked_mul(dim))
                .ok_or_else(|| BankError::CorruptHeader("tensor size overflow".into()))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| BankError::CorruptHeader("tensor size overflow".into()))?)?;
            if r.pos - start != len {
                return Err(BankError::CorruptHeader("record length mismatch".into()));
            }
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            bank.record(
                BankKey::new(timestep, site, kind, source),
                BankTensor {
                    heads,
                    tokens,
                    dim,
                    data,
                },
            )
            .map_err(|e| BankError::CorruptHeader(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(BankError::CorruptHeader("trailing bytes".into()));
        }
        Ok(bank)
    }

    pub fn save_cache(&self, path: impl AsRef<Path>) -> Result<(), BankError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load_cache(path: impl AsRef<Path>) -> Result<Self, BankError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized form.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BankError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| BankError::CorruptHeader(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, BankError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, BankError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, BankError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn site(&mut self) -> Result<AttentionSiteId, BankError> {
        let index = self.u32()? as usize;
        let stage = Stage::from_code(self.u8()?)
            .ok_or_else(|| BankError::CorruptHeader("bad stage code".into()))?;
        Ok(AttentionSiteId { index, stage })
    }
}

/// Records selected tensors into a bank and passes attention through untouched.
pub struct CaptureController<'a> {
    bank: &'a mut AttentionBank,
    source: BankSource,
    kinds: Vec<TensorKind>,
    sites: Option<BTreeSet<usize>>,
}

impl<'a> CaptureController<'a> {
    /// `sites = None` captures every site.
    pub fn new(
        bank: &'a mut AttentionBank,
        source: BankSource,
        kinds: &[TensorKind],
        sites: Option<BTreeSet<usize>>,
    ) -> Self {
        Self {
            bank,
            source,
            kinds: kinds.to_vec(),
            sites,
        }
    }
}

impl AttentionController for CaptureController<'_> {
    fn intercept(
        &mut self,
        site: AttentionSiteId,
        timestep: usize,
        qkv: Qkv,
    ) -> Result<AttentionOverride, ControllerError> {
        let wanted = self.sites.as_ref().is_none_or(|s| s.contains(&site.index));
        if wanted {
            for &kind in &self.kinds {
                let tensor = match kind {
                    TensorKind::Q => &qkv.q,
                    TensorKind::K => &qkv.k,
                    TensorKind::V => &qkv.v,
                };
                self.bank
                    .record(
                        BankKey::new(timestep, site, kind, self.source),
                        BankTensor::from_array(tensor),
                    )
                    .map_err(|e| ControllerError(e.to_string()))?;
            }
        }
        Ok(AttentionOverride::Replace(qkv))
    }
}

/// The three banks consumed by the mixing controller.
#[derive(Clone, Debug, PartialEq)]
pub struct BankSet {
    pub reference: AttentionBank,
    pub color: AttentionBank,
    pub contour: AttentionBank,
}

impl BankSet {
    pub fn get(&self, source: BankSource) -> &AttentionBank {
        match source {
            BankSource::Reference => &self.reference,
            BankSource::Color => &self.color,
            BankSource::Contour => &self.contour,
        }
    }

    pub fn verify_schedule(&self, expected: &ScheduleHash) -> Result<(), BankError> {
        self.reference.verify_schedule(expected)?;
        self.color.verify_schedule(expected)?;
        self.contour.verify_schedule(expected)
    }

    /// Checks that every `(timestep, site)` pair has reference Q/K/V and
    /// colour/contour Q.
    pub fn validate(&self, timesteps: &[usize], sites: &[AttentionSiteId]) -> Result<(), BankError> {
        for source in [BankSource::Reference, BankSource::Color, BankSource::Contour] {
            let bank = self.get(source);
            for &t in timesteps {
                for &site in sites {
                    for &kind in source.captured_kinds() {
                        bank.lookup(&BankKey::new(t, site, kind, source))?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Hex digests of the serialized banks, reference/colour/contour.
    pub fn digests(&self) -> [String; 3] {
        [
            hex::encode(self.reference.digest()),
            hex::encode(self.color.digest()),
            hex::encode(self.contour.digest()),
        ]
    }
}
