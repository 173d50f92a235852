//! TVCK container: the on-disk format for weights, task vectors, coefficient
//! sets and cached datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TVCK" | u32 version = 1 | u64 header_len | JSON header (UTF-8) | f32 payload
//! ```
//!
//! The header names every block with its element offset and length into the
//! payload. Factored task vectors list `{name, rank, a_offset, b_offset}`
//! entries; the down factor `A` (`rank × in`) and the up factor `B`
//! (`out × rank`) are stored row-major at those element offsets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockKind, BlockSpec, BlockedTensor, CoefficientSet, Payload, TaskVector};
use crate::error::{Error, Result};
use crate::lora::LoraFactor;

pub const MAGIC: &[u8; 4] = b"TVCK";
pub const VERSION: u32 = 1;
const PRELUDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: String,
    pub offset_elems: u64,
    pub len_elems: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorEntry {
    pub name: String,
    pub rank: usize,
    pub a_offset: u64,
    pub b_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub base_fingerprint: String,
    pub blocks: Vec<BlockEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factored: Option<Vec<FactorEntry>>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Parsed header plus the raw payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub payload: Vec<f32>,
}

pub fn fingerprint_hex(fp: u64) -> String {
    format!("{fp:016x}")
}

fn parse_fingerprint(s: &str) -> Result<u64> {
    u64::from_str_radix(s, 16).map_err(|_| Error::format(PRELUDE as u64, format!("bad base_fingerprint `{s}`")))
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(PRELUDE + header.len() + self.payload.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PRELUDE {
            return Err(Error::format(bytes.len() as u64, format!("truncated prelude: {} of {PRELUDE} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(0, format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = (PRELUDE as u64).checked_add(header_len).filter(|&e| e <= bytes.len() as u64).ok_or_else(|| {
            Error::format(bytes.len() as u64, format!("truncated header: declared {header_len} bytes"))
        })? as usize;
        let header: Header = serde_json::from_slice(&bytes[PRELUDE..header_end]).map_err(|e| {
            // locate the parse failure inside the header
            let line_start: usize =
                bytes[PRELUDE..header_end].split(|&b| b == b'\n').take(e.line().saturating_sub(1)).map(|l| l.len() + 1).sum();
            Error::format((PRELUDE + line_start + e.column().saturating_sub(1)) as u64, format!("header JSON: {e}"))
        })?;
        let raw = &bytes[header_end..];
        if !raw.len().is_multiple_of(4) {
            let whole = raw.len() / 4 * 4;
            return Err(Error::format((header_end + whole) as u64, "payload is not a whole number of f32 values"));
        }
        let payload: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let c = Container { header, payload };
        c.validate(header_end as u64)?;
        Ok(c)
    }

    fn validate(&self, payload_start: u64) -> Result<()> {
        let n = self.payload.len() as u64;
        let at = |elem: u64| payload_start + 4 * elem;
        if self.header.blocks.is_empty() && n > 0 {
            return Err(Error::format(payload_start, format!("header declares 0 blocks but payload has {n} values")));
        }
        let mut covered = 0u64;
        let mut check_range = |what: &str, off: u64, len: u64| -> Result<()> {
            let end = off.checked_add(len).ok_or_else(|| Error::format(payload_start, format!("{what}: offset overflow")))?;
            if end > n {
                return Err(Error::format(at(n), format!("{what}: elements {off}..{end} exceed payload of {n} (truncated)")));
            }
            covered += len;
            Ok(())
        };
        for b in &self.header.blocks {
            let expected: u64 = b.shape.iter().map(|&d| d as u64).product();
            if b.len_elems != 0 && b.len_elems != expected {
                return Err(Error::format(
                    at(b.offset_elems),
                    format!("block `{}` declares {} elements for shape {:?}", b.name, b.len_elems, b.shape),
                ));
            }
            check_range(&format!("block `{}`", b.name), b.offset_elems, b.len_elems)?;
        }
        for f in self.header.factored.iter().flatten() {
            let block = self
                .header
                .blocks
                .iter()
                .find(|b| b.name == f.name)
                .ok_or_else(|| Error::format(payload_start, format!("factor for unknown block `{}`", f.name)))?;
            let [rows, cols] = block.shape[..] else {
                return Err(Error::format(payload_start, format!("factor on non-matrix block `{}`", f.name)));
            };
            check_range(&format!("factor A of `{}`", f.name), f.a_offset, (f.rank * cols) as u64)?;
            check_range(&format!("factor B of `{}`", f.name), f.b_offset, (rows * f.rank) as u64)?;
        }
        if covered != n {
            return Err(Error::format(at(covered.min(n)), format!("payload has {n} values but header references {covered}")));
        }
        Ok(())
    }

    pub fn slice(&self, offset: u64, len: u64) -> &[f32] {
        &self.payload[offset as usize..(offset + len) as usize]
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Container::from_bytes(&std::fs::read(path)?)
    }
}

/// Objects that persist as a TVCK container.
pub trait TvckObject: Sized {
    const KIND: &'static str;
    fn to_container(&self) -> Result<Container>;
    fn from_container(c: Container) -> Result<Self>;
}

pub fn save<T: TvckObject>(path: impl AsRef<Path>, obj: &T) -> Result<()> {
    obj.to_container()?.write(path.as_ref())
}

pub fn load<T: TvckObject>(path: impl AsRef<Path>) -> Result<T> {
    let c = Container::read(path.as_ref())?;
    if c.header.kind != T::KIND {
        return Err(Error::format(PRELUDE as u64, format!("expected kind `{}`, found `{}`", T::KIND, c.header.kind)));
    }
    T::from_container(c)
}

pub fn to_bytes<T: TvckObject>(obj: &T) -> Result<Vec<u8>> {
    obj.to_container()?.to_bytes()
}

pub fn from_bytes<T: TvckObject>(bytes: &[u8]) -> Result<T> {
    let c = Container::from_bytes(bytes)?;
    if c.header.kind != T::KIND {
        return Err(Error::format(PRELUDE as u64, format!("expected kind `{}`, found `{}`", T::KIND, c.header.kind)));
    }
    T::from_container(c)
}

/// Append `data` to the payload and return its entry.
pub(crate) fn push_block(payload: &mut Vec<f32>, name: &str, shape: Vec<usize>, kind: &str, data: &[f32]) -> BlockEntry {
    let offset = payload.len() as u64;
    payload.extend_from_slice(data);
    BlockEntry { name: name.into(), shape, kind: kind.into(), offset_elems: offset, len_elems: data.len() as u64 }
}

fn spec_from_entry(e: &BlockEntry) -> Result<BlockSpec> {
    let kind = BlockKind::parse(&e.kind).ok_or_else(|| Error::format(PRELUDE as u64, format!("unknown block kind `{}`", e.kind)))?;
    BlockSpec::new(e.name.clone(), e.shape.clone(), kind)
}

fn dense_container(kind: &str, fp: u64, t: &BlockedTensor, meta: serde_json::Value) -> Container {
    let mut payload = Vec::with_capacity(t.num_elements());
    let blocks = t
        .specs()
        .iter()
        .zip(t.blocks())
        .map(|(s, d)| push_block(&mut payload, &s.name, s.shape.clone(), s.kind.as_str(), d))
        .collect();
    Container { header: Header { kind: kind.into(), base_fingerprint: fingerprint_hex(fp), blocks, factored: None, meta }, payload }
}

fn dense_from(c: &Container) -> Result<BlockedTensor> {
    let mut specs = Vec::new();
    let mut data = Vec::new();
    for e in &c.header.blocks {
        specs.push(spec_from_entry(e)?);
        data.push(c.slice(e.offset_elems, e.len_elems).to_vec());
    }
    BlockedTensor::new(specs, data)
}

impl TvckObject for BlockedTensor {
    const KIND: &'static str = "weights";

    fn to_container(&self) -> Result<Container> {
        Ok(dense_container(Self::KIND, self.fingerprint(), self, serde_json::Value::Null))
    }

    fn from_container(c: Container) -> Result<Self> {
        dense_from(&c)
    }
}

impl TvckObject for TaskVector {
    const KIND: &'static str = "taskvector";

    fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({ "id": self.id });
        match self.payload() {
            Payload::Dense(t) => Ok(dense_container(Self::KIND, self.base_fingerprint, t, meta)),
            Payload::Factored { specs, factors } => {
                let mut payload = Vec::new();
                let blocks = specs
                    .iter()
                    .map(|s| BlockEntry {
                        name: s.name.clone(),
                        shape: s.shape.clone(),
                        kind: s.kind.as_str().into(),
                        offset_elems: 0,
                        len_elems: 0,
                    })
                    .collect();
                let mut entries = Vec::new();
                for f in factors {
                    let a_offset = payload.len() as u64;
                    payload.extend_from_slice(&f.down);
                    let b_offset = payload.len() as u64;
                    payload.extend_from_slice(&f.up);
                    entries.push(FactorEntry { name: f.block.clone(), rank: f.rank, a_offset, b_offset });
                }
                Ok(Container {
                    header: Header {
                        kind: Self::KIND.into(),
                        base_fingerprint: fingerprint_hex(self.base_fingerprint),
                        blocks,
                        factored: Some(entries),
                        meta,
                    },
                    payload,
                })
            }
        }
    }

    fn from_container(c: Container) -> Result<Self> {
        let fp = parse_fingerprint(&c.header.base_fingerprint)?;
        let id = c.header.meta.get("id").and_then(|v| v.as_str()).unwrap_or_default().to_string();
        match &c.header.factored {
            None => Ok(TaskVector::dense(id, fp, dense_from(&c)?)),
            Some(entries) => {
                let specs = c.header.blocks.iter().map(spec_from_entry).collect::<Result<Vec<_>>>()?;
                let mut factors = Vec::new();
                for f in entries {
                    let spec = specs.iter().find(|s| s.name == f.name).ok_or_else(|| Error::UnknownBlock(f.name.clone()))?;
                    let (rows, cols) = spec.matrix_dims().ok_or_else(|| Error::shape(&f.name, "factor on a non-matrix block"))?;
                    factors.push(LoraFactor {
                        block: f.name.clone(),
                        rank: f.rank,
                        out_dim: rows,
                        in_dim: cols,
                        down: c.slice(f.a_offset, (f.rank * cols) as u64).to_vec(),
                        up: c.slice(f.b_offset, (rows * f.rank) as u64).to_vec(),
                    });
                }
                TaskVector::factored(id, fp, specs, factors)
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CoeffMeta {
    tv_ids: Vec<String>,
    block_names: Vec<String>,
    #[serde(default)]
    partition_seed: Option<u64>,
}

impl TvckObject for CoefficientSet {
    const KIND: &'static str = "coeffs";

    fn to_container(&self) -> Result<Container> {
        self.validate()?;
        let meta = serde_json::to_value(CoeffMeta {
            tv_ids: self.tv_ids.clone(),
            block_names: self.block_names.clone(),
            partition_seed: self.partition_seed,
        })?;
        let mut payload = Vec::new();
        let shape = vec![self.tv_ids.len(), self.block_names.len(), self.partitions];
        let blocks = if self.values.is_empty() {
            Vec::new()
        } else {
            vec![push_block(&mut payload, "coeffs", shape, "coeffs", &self.values)]
        };
        Ok(Container {
            header: Header { kind: Self::KIND.into(), base_fingerprint: fingerprint_hex(0), blocks, factored: None, meta },
            payload,
        })
    }

    fn from_container(c: Container) -> Result<Self> {
        let meta: CoeffMeta = serde_json::from_value(c.header.meta.clone())?;
        let (partitions, values) = match c.header.blocks.first() {
            Some(b) => (b.shape.get(2).copied().unwrap_or(1), c.slice(b.offset_elems, b.len_elems).to_vec()),
            None => (1, Vec::new()),
        };
        let cs = CoefficientSet {
            tv_ids: meta.tv_ids,
            block_names: meta.block_names,
            partitions,
            values,
            partition_seed: meta.partition_seed,
        };
        cs.validate()?;
        Ok(cs)
    }
}
