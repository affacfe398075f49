//! Single-file, checksummed engine snapshots.
//!
//! Layout (all integers little-endian, floats IEEE-754 binary32):
//!
//! ```text
//! magic            8 bytes  "FLTRSNP1"
//! format_version   u32
//! snapshot_version u64
//! dim              u32
//! n_items          u64
//! n_slots          u64
//! n_clusters       u32
//! bloom_m          u32
//! bloom_k          u32
//! hash_scheme      u32
//! n_sections       u32
//! section table    n_sections x (id u32, offset u64, len u64, fnv1a64 u64)
//! header checksum  u64      fnv1a64 of every preceding byte
//! sections         contiguous, in table order
//! ```
//!
//! A loaded snapshot is either complete and verified or an error; there is
//! no partially loaded engine.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::bitmask::BitMask;
use crate::catalog::{Catalog, FeatureDictionary};
use crate::codec::{ByteReader, ByteWriter, CodecError};
use crate::filter::{BloomIndex, BloomParams, HashScheme};
use crate::hash::fnv1a64;
use crate::ivf::{ClusterRange, IvfIndex};
use crate::kmeans::Centroids;
use crate::linalg::Matrix;
use crate::quantize::{QuantParams, QuantizedMatrix};
use crate::retrieval::{EmbeddingCache, Engine, EngineConfig, OverArchModel, RetrievalError, ValueExpr};

pub const MAGIC: &[u8; 8] = b"FLTRSNP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("not a snapshot file (bad magic)")]
    BadMagic,
    #[error("unsupported snapshot format version {0}")]
    VersionUnsupported(u32),
    #[error("checksum mismatch in section {0}")]
    ChecksumMismatch(String),
    #[error("snapshot truncated: {0}")]
    Truncated(String),
    #[error("malformed snapshot: {0}")]
    Malformed(String),
    #[error(transparent)]
    Engine(#[from] RetrievalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<CodecError> for SnapshotError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Truncated { .. } => Self::Truncated(e.to_string()),
            CodecError::Malformed(m) => Self::Malformed(m),
        }
    }
}

type Result<T> = std::result::Result<T, SnapshotError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u32)]
pub enum SectionId {
    Centroids = 1,
    Layout = 2,
    QuantizedItems = 3,
    QuantParams = 4,
    BloomPlanes = 5,
    Validity = 6,
    ItemIds = 7,
    EmbeddingCache = 8,
    Scorer = 9,
    ValueModel = 10,
    Dictionary = 11,
}

impl SectionId {
    pub const ALL: [SectionId; 11] = [
        Self::Centroids,
        Self::Layout,
        Self::QuantizedItems,
        Self::QuantParams,
        Self::BloomPlanes,
        Self::Validity,
        Self::ItemIds,
        Self::EmbeddingCache,
        Self::Scorer,
        Self::ValueModel,
        Self::Dictionary,
    ];

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|s| *s as u32 == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Centroids => "centroids",
            Self::Layout => "layout",
            Self::QuantizedItems => "quantized_items",
            Self::QuantParams => "quant_params",
            Self::BloomPlanes => "bloom_planes",
            Self::Validity => "validity",
            Self::ItemIds => "item_ids",
            Self::EmbeddingCache => "embedding_cache",
            Self::Scorer => "scorer",
            Self::ValueModel => "value_model",
            Self::Dictionary => "dictionary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SectionEntry {
    pub name: &'static str,
    pub id: u32,
    pub offset: u64,
    pub len: u64,
    pub checksum: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SnapshotHeader {
    pub format_version: u32,
    pub snapshot_version: u64,
    pub dim: u32,
    pub n_items: u64,
    pub n_slots: u64,
    pub n_clusters: u32,
    pub bloom_m: u32,
    pub bloom_k: u32,
    pub hash_scheme_id: u32,
    pub sections: Vec<SectionEntry>,
}

const FIXED_HEADER: usize = 8 + 4 + 8 + 4 + 8 + 8 + 4 + 4 + 4 + 4 + 4;
const ENTRY_BYTES: usize = 4 + 8 + 8 + 8;

fn encode_sections(e: &Engine) -> Vec<(SectionId, Vec<u8>)> {
    let ivf = &e.ivf;
    let mut out = Vec::new();

    let mut w = ByteWriter::new();
    w.f32s(ivf.centroids().vectors.as_slice());
    out.push((SectionId::Centroids, w.into_inner()));

    let mut w = ByteWriter::new();
    w.u32s(ivf.perm());
    for c in ivf.clusters() {
        w.u64(c.start as u64);
        w.u64(c.end as u64);
        w.u64(c.len as u64);
    }
    out.push((SectionId::Layout, w.into_inner()));

    let mut w = ByteWriter::new();
    w.i8s(ivf.items_q().as_slice());
    out.push((SectionId::QuantizedItems, w.into_inner()));

    let qp = ivf.quant_params();
    let mut w = ByteWriter::new();
    w.f32(qp.global_min);
    w.f32(qp.global_max);
    w.f32(qp.scale);
    out.push((SectionId::QuantParams, w.into_inner()));

    let mut w = ByteWriter::new();
    w.u64s(e.bloom.raw_planes());
    out.push((SectionId::BloomPlanes, w.into_inner()));

    let mut w = ByteWriter::new();
    w.u64s(ivf.valid_mask().words());
    out.push((SectionId::Validity, w.into_inner()));

    let mut w = ByteWriter::new();
    w.u64s(ivf.item_ids());
    out.push((SectionId::ItemIds, w.into_inner()));

    let mut w = ByteWriter::new();
    w.u64(e.cache.len() as u64);
    w.u64(e.cache.dim() as u64);
    w.u64s(e.cache.ids());
    w.f32s(e.cache.data().as_slice());
    out.push((SectionId::EmbeddingCache, w.into_inner()));

    out.push((SectionId::Scorer, e.overarch.to_bytes()));
    out.push((
        SectionId::ValueModel,
        e.value_model.as_ref().map(|v| v.to_json().into_bytes()).unwrap_or_default(),
    ));
    out.push((
        SectionId::Dictionary,
        serde_json::to_vec(&e.dictionary).expect("dictionary serializes"),
    ));
    out
}

/// Serializes `engine`. Identical engines give identical bytes.
pub fn encode(engine: &Engine) -> Vec<u8> {
    let sections = encode_sections(engine);
    let header_len = FIXED_HEADER + sections.len() * ENTRY_BYTES + 8;
    let p = engine.bloom.params();
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(engine.version);
    w.u32(engine.dim() as u32);
    w.u64(engine.ivf.n_items() as u64);
    w.u64(engine.ivf.n_slots() as u64);
    w.u32(engine.ivf.n_clusters() as u32);
    w.u32(p.m_bits);
    w.u32(p.k_hashes);
    w.u32(p.scheme.id());
    w.u32(sections.len() as u32);
    let mut offset = header_len as u64;
    for (id, body) in &sections {
        w.u32(*id as u32);
        w.u64(offset);
        w.u64(body.len() as u64);
        w.u64(fnv1a64(body));
        offset += body.len() as u64;
    }
    let mut bytes = w.into_inner();
    let h = fnv1a64(&bytes);
    bytes.extend_from_slice(&h.to_le_bytes());
    debug_assert_eq!(bytes.len(), header_len);
    for (_, body) in sections {
        bytes.extend_from_slice(&body);
    }
    bytes
}

/// Builds an engine from `catalog` and writes its snapshot to `path`.
pub fn publish(catalog: &Catalog, cfg: &EngineConfig, path: &Path) -> Result<Engine> {
    let engine = Engine::build(catalog, cfg)?;
    write_snapshot(&engine, path)?;
    Ok(engine)
}

/// Writes to a temporary sibling and renames it into place, so readers never
/// see a half-written file.
pub fn write_snapshot(engine: &Engine, path: &Path) -> Result<()> {
    let bytes = encode(engine);
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_header(bytes: &[u8]) -> Result<SnapshotHeader> {
    if bytes.len() < 8 {
        return Err(if MAGIC.starts_with(bytes) {
            SnapshotError::Truncated("file shorter than the magic".into())
        } else {
            SnapshotError::BadMagic
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    let mut r = ByteReader::new(&bytes[8..]);
    let format_version = r.u32()?;
    if format_version != FORMAT_VERSION {
        return Err(SnapshotError::VersionUnsupported(format_version));
    }
    let snapshot_version = r.u64()?;
    let dim = r.u32()?;
    let n_items = r.u64()?;
    let n_slots = r.u64()?;
    let n_clusters = r.u32()?;
    let bloom_m = r.u32()?;
    let bloom_k = r.u32()?;
    let hash_scheme_id = r.u32()?;
    let n_sections = r.u32()? as usize;
    if n_sections > SectionId::ALL.len() {
        return Err(SnapshotError::Malformed(format!("{n_sections} sections listed")));
    }
    let mut raw = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        raw.push((r.u32()?, r.u64()?, r.u64()?, r.u64()?));
    }
    let header_end = 8 + r.position();
    let stored = r.u64()?;
    if fnv1a64(&bytes[..header_end]) != stored {
        return Err(SnapshotError::ChecksumMismatch("header".into()));
    }
    let mut sections = Vec::with_capacity(n_sections);
    let mut expect = (header_end + 8) as u64;
    for (id, offset, len, checksum) in raw {
        let sid = SectionId::from_id(id).ok_or_else(|| SnapshotError::Malformed(format!("unknown section id {id}")))?;
        if sections.iter().any(|s: &SectionEntry| s.id == id) {
            return Err(SnapshotError::Malformed(format!("section {} listed twice", sid.name())));
        }
        if offset != expect {
            return Err(SnapshotError::Malformed(format!("section {} is not contiguous", sid.name())));
        }
        expect = offset
            .checked_add(len)
            .ok_or_else(|| SnapshotError::Malformed("section length overflows".into()))?;
        sections.push(SectionEntry { name: sid.name(), id, offset, len, checksum });
    }
    if expect > bytes.len() as u64 {
        return Err(SnapshotError::Truncated(format!(
            "sections end at byte {expect}, file has {}",
            bytes.len()
        )));
    }
    if expect < bytes.len() as u64 {
        return Err(SnapshotError::Malformed(format!("{} trailing bytes", bytes.len() as u64 - expect)));
    }
    Ok(SnapshotHeader {
        format_version,
        snapshot_version,
        dim,
        n_items,
        n_slots,
        n_clusters,
        bloom_m,
        bloom_k,
        hash_scheme_id,
        sections,
    })
}

/// Verifies and decodes a whole snapshot.
pub fn decode(bytes: &[u8]) -> Result<Engine> {
    let h = read_header(bytes)?;
    let section = |id: SectionId| -> Result<&[u8]> {
        let e = h
            .sections
            .iter()
            .find(|s| s.id == id as u32)
            .ok_or_else(|| SnapshotError::Malformed(format!("missing section {}", id.name())))?;
        let body = &bytes[e.offset as usize..(e.offset + e.len) as usize];
        if fnv1a64(body) != e.checksum {
            return Err(SnapshotError::ChecksumMismatch(id.name().into()));
        }
        Ok(body)
    };
    // Verify every checksum before decoding anything.
    for id in SectionId::ALL {
        section(id)?;
    }
    let malformed = |m: String| SnapshotError::Malformed(m);
    let dim = h.dim as usize;
    let n_slots = usize::try_from(h.n_slots).map_err(|_| malformed("slot count too large".into()))?;
    let k = h.n_clusters as usize;
    let n_words = n_slots.div_ceil(64);

    let mut r = ByteReader::new(section(SectionId::Centroids)?);
    let cv = r.f32s(k.checked_mul(dim).ok_or_else(|| malformed("centroid size overflows".into()))?)?;
    r.finish()?;
    let centroids = Centroids::new(Matrix::from_vec(cv, k, dim)).map_err(|e| malformed(e.to_string()))?;

    let mut r = ByteReader::new(section(SectionId::Layout)?);
    let perm = r.u32s(n_slots)?;
    let mut clusters = Vec::with_capacity(k);
    for _ in 0..k {
        clusters.push(ClusterRange {
            start: r.u64()? as usize,
            end: r.u64()? as usize,
            len: r.u64()? as usize,
        });
    }
    r.finish()?;

    let mut r = ByteReader::new(section(SectionId::QuantParams)?);
    let qp = QuantParams {
        global_min: r.f32()?,
        global_max: r.f32()?,
        scale: r.f32()?,
    };
    r.finish()?;

    let mut r = ByteReader::new(section(SectionId::QuantizedItems)?);
    let q = r.i8s(n_slots.checked_mul(dim).ok_or_else(|| malformed("item size overflows".into()))?)?;
    r.finish()?;
    let items_q = QuantizedMatrix::from_raw(q, n_slots, dim, qp);

    let mut r = ByteReader::new(section(SectionId::Validity)?);
    let valid = BitMask::from_words(r.u64s(n_words)?, n_slots);
    r.finish()?;

    let mut r = ByteReader::new(section(SectionId::ItemIds)?);
    let item_ids = r.u64s(n_slots)?;
    r.finish()?;

    let ivf = IvfIndex::from_parts(centroids, perm, clusters, items_q, valid, item_ids)
        .map_err(|e| malformed(e.to_string()))?;
    if ivf.n_items() as u64 != h.n_items {
        return Err(malformed("item count disagrees with header".into()));
    }

    let scheme = HashScheme::from_id(h.hash_scheme_id)
        .ok_or_else(|| malformed(format!("unknown hash scheme {}", h.hash_scheme_id)))?;
    let mut params = BloomParams::new(h.bloom_m, h.bloom_k).map_err(|e| malformed(e.to_string()))?;
    params.scheme = scheme;
    let mut r = ByteReader::new(section(SectionId::BloomPlanes)?);
    let planes = r.u64s((h.bloom_m as usize).checked_mul(n_words).ok_or_else(|| malformed("plane size overflows".into()))?)?;
    r.finish()?;
    let bloom = BloomIndex::from_parts(params, planes, n_slots).map_err(|e| malformed(e.to_string()))?;

    let mut r = ByteReader::new(section(SectionId::EmbeddingCache)?);
    let n = r.count(8)?;
    let cdim = r.u64()? as usize;
    let ids = r.u64s(n)?;
    let data = r.f32s(n.checked_mul(cdim).ok_or_else(|| malformed("cache size overflows".into()))?)?;
    r.finish()?;
    let cache = EmbeddingCache::new(ids, Matrix::from_vec(data, n, cdim))?;

    let overarch = OverArchModel::from_bytes(section(SectionId::Scorer)?)?;
    let vm_bytes = section(SectionId::ValueModel)?;
    let value_model = if vm_bytes.is_empty() {
        None
    } else {
        let text = std::str::from_utf8(vm_bytes).map_err(|_| malformed("value model is not utf-8".into()))?;
        Some(ValueExpr::from_json(text)?)
    };
    let dictionary: FeatureDictionary =
        serde_json::from_slice(section(SectionId::Dictionary)?).map_err(|e| malformed(format!("dictionary: {e}")))?;

    Ok(Engine::from_parts(
        h.snapshot_version,
        ivf,
        bloom,
        cache,
        overarch,
        value_model,
        dictionary,
    )?)
}

pub fn load(path: &Path) -> Result<Engine> {
    decode(&fs::read(path)?)
}

/// Header of the snapshot at `path`, as JSON.
pub fn describe(path: &Path) -> Result<serde_json::Value> {
    let bytes = fs::read(path)?;
    let h = read_header(&bytes)?;
    let mut v = serde_json::to_value(&h).expect("header serializes");
    v["file_bytes"] = bytes.len().into();
    Ok(v)
}
