//! Reading and writing checkpoints in the "u64 header length + JSON header +
//! raw payload" tensor container used to distribute public model weights.
//!
//! Layout:
//!
//! ```text
//! [0..8)        u64 little-endian N, the header byte length
//! [8..8+N)      UTF-8 JSON: { name: {"dtype", "shape", "data_offsets": [begin, end]}, ...,
//!                             "__metadata__": {string: string} }
//! [8+N..)       payload; offsets are relative to its first byte
//! ```
//!
//! Payload bytes are never reinterpreted on read. The writer is canonical:
//! metadata first, then tensors in lexicographic name order with contiguous
//! offsets. The header is padded with trailing spaces to a multiple of eight
//! bytes so payloads stay aligned for zero-copy readers.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use half::f16;
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::Value;

const METADATA_KEY: &str = "__metadata__";
const HEADER_ALIGN: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("file is {0} bytes, too small to hold the 8-byte header length")]
    Truncated(usize),
    #[error("header length {declared} exceeds the {available} bytes available after the length prefix")]
    HeaderTooLarge { declared: u64, available: usize },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor `{name}`: data offsets [{begin}, {end}) out of bounds for a {payload}-byte payload")]
    OutOfBounds {
        name: String,
        begin: u64,
        end: u64,
        payload: usize,
    },
    #[error("tensors `{first}` and `{second}` have overlapping data offsets")]
    OverlappingOffsets { first: String, second: String },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{name}`: unsupported dtype `{dtype}`")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor `{name}`: buffer holds {actual} bytes but shape and dtype require {expected}")]
    SizeMismatch {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("tensor names must be non-empty and must not be `{METADATA_KEY}`")]
    InvalidName,
    #[error("tensor `{name}` has dtype {dtype}, expected a floating-point dtype")]
    NotFloat { name: String, dtype: DType },
}

/// Scalar element type of a stored tensor.
///
/// Only the three float types take part in arithmetic; the integer and bool
/// types are carried so real checkpoints (position ids, masks) round-trip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F16,
    F32,
    F64,
    Bool,
    U8,
    I8,
    I16,
    U16,
    I32,
    U32,
    I64,
    U64,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::Bool | DType::U8 | DType::I8 => 1,
            DType::F16 | DType::I16 | DType::U16 => 2,
            DType::F32 | DType::I32 | DType::U32 => 4,
            DType::F64 | DType::I64 | DType::U64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F16 | DType::F32 | DType::F64)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F16 => "F16",
            DType::F32 => "F32",
            DType::F64 => "F64",
            DType::Bool => "BOOL",
            DType::U8 => "U8",
            DType::I8 => "I8",
            DType::I16 => "I16",
            DType::U16 => "U16",
            DType::I32 => "I32",
            DType::U32 => "U32",
            DType::I64 => "I64",
            DType::U64 => "U64",
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        Some(match s {
            "F16" => DType::F16,
            "F32" => DType::F32,
            "F64" => DType::F64,
            "BOOL" => DType::Bool,
            "U8" => DType::U8,
            "I8" => DType::I8,
            "I16" => DType::I16,
            "U16" => DType::U16,
            "I32" => DType::I32,
            "U32" => DType::U32,
            "I64" => DType::I64,
            "U64" => DType::U64,
            _ => return None,
        })
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One tensor: dtype, row-major shape and its little-endian byte buffer.
///
/// The buffer length always equals `numel * dtype.width()`; the constructor
/// is the only way in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl TensorEntry {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self, TensorError> {
        let expected = shape.iter().product::<usize>() * dtype.width();
        if expected != data.len() {
            return Err(TensorError::SizeMismatch {
                name: String::new(),
                expected,
                actual: data.len(),
            });
        }
        Ok(TensorEntry { dtype, shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Self, TensorError> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(DType::F32, shape, data)
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self, TensorError> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(DType::F64, shape, data)
    }

    pub fn from_f16(shape: Vec<usize>, values: &[f16]) -> Result<Self, TensorError> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(DType::F16, shape, data)
    }

    /// Encodes `values` into `dtype`, rounding each element once to nearest.
    pub fn encode_f64(dtype: DType, shape: Vec<usize>, values: &[f64]) -> Result<Self, TensorError> {
        let data: Vec<u8> = match dtype {
            DType::F16 => values
                .iter()
                .flat_map(|&v| f16::from_f64(v).to_le_bytes())
                .collect(),
            DType::F32 => values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
            DType::F64 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
            other => {
                return Err(TensorError::NotFloat {
                    name: String::new(),
                    dtype: other,
                })
            }
        };
        Self::new(dtype, shape, data)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Widens every element to f64. Exact for all three float dtypes.
    pub fn to_f64_vec(&self) -> Result<Vec<f64>, TensorError> {
        let out = match self.dtype {
            DType::F16 => self
                .data
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
            DType::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => self
                .data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            other => {
                return Err(TensorError::NotFloat {
                    name: String::new(),
                    dtype: other,
                })
            }
        };
        Ok(out)
    }

    pub fn to_f32_vec(&self) -> Result<Vec<f32>, TensorError> {
        match self.dtype {
            DType::F32 => Ok(self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()),
            _ => Ok(self.to_f64_vec()?.into_iter().map(|v| v as f32).collect()),
        }
    }
}

/// Provenance role recorded under the `role` metadata key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Pretrained,
    Domain,
    Ir,
    Merged,
    TaskVector,
}

impl Role {
    pub const KEY: &'static str = "role";

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Pretrained => "pretrained",
            Role::Domain => "domain",
            Role::Ir => "ir",
            Role::Merged => "merged",
            Role::TaskVector => "task_vector",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Some(match s {
            "pretrained" => Role::Pretrained,
            "domain" => Role::Domain,
            "ir" => Role::Ir,
            "merged" => Role::Merged,
            "task_vector" => Role::TaskVector,
            _ => return None,
        })
    }
}

/// Named tensors plus free-form string metadata. Iteration is always in
/// lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, TensorEntry>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor. Fails on an empty or reserved name, or a name already present.
    pub fn insert(&mut self, name: impl Into<String>, entry: TensorEntry) -> Result<(), TensorError> {
        let name = name.into();
        if name.is_empty() || name == METADATA_KEY {
            return Err(TensorError::InvalidName);
        }
        if self.tensors.contains_key(&name) {
            return Err(TensorError::DuplicateName(name));
        }
        self.tensors.insert(name, entry);
        Ok(())
    }

    pub fn with_tensor(mut self, name: impl Into<String>, entry: TensorEntry) -> Result<Self, TensorError> {
        self.insert(name, entry)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorEntry)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn role(&self) -> Option<Role> {
        self.metadata.get(Role::KEY).and_then(|r| Role::parse(r))
    }

    pub fn set_role(&mut self, role: Role) {
        self.set_metadata(Role::KEY, role.as_str());
    }

    /// Compares tensors only, ignoring metadata.
    pub fn same_tensors(&self, other: &Checkpoint) -> bool {
        self.tensors == other.tensors
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < 8 {
            return Err(TensorError::Truncated(bytes.len()));
        }
        let declared = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let available = bytes.len() - 8;
        if declared > available as u64 {
            return Err(TensorError::HeaderTooLarge {
                declared,
                available,
            });
        }
        let header_end = 8 + declared as usize;
        let header = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| TensorError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let raw: RawHeader = serde_json::from_str(header)
            .map_err(|e| TensorError::MalformedHeader(e.to_string()))?;
        let payload = &bytes[header_end..];

        let mut seen = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        let mut infos: Vec<(String, TensorInfo)> = Vec::new();
        for (name, value) in raw.0 {
            if seen.insert(name.clone(), ()).is_some() {
                return Err(TensorError::DuplicateName(name));
            }
            if name == METADATA_KEY {
                metadata = parse_metadata(value)?;
                continue;
            }
            let info = parse_info(&name, value)?;
            if info.begin > info.end || info.end > payload.len() as u64 {
                return Err(TensorError::OutOfBounds {
                    name,
                    begin: info.begin,
                    end: info.end,
                    payload: payload.len(),
                });
            }
            let expected = info.shape.iter().product::<usize>() * info.dtype.width();
            let actual = (info.end - info.begin) as usize;
            if expected != actual {
                return Err(TensorError::SizeMismatch {
                    name,
                    expected,
                    actual,
                });
            }
            infos.push((name, info));
        }

        let mut spans: Vec<(u64, u64, &str)> = infos
            .iter()
            .map(|(name, info)| (info.begin, info.end, name.as_str()))
            .collect();
        spans.sort();
        for pair in spans.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            // zero-length buffers cannot overlap anything
            if a.0 < a.1 && b.0 < b.1 && b.0 < a.1 {
                return Err(TensorError::OverlappingOffsets {
                    first: a.2.to_string(),
                    second: b.2.to_string(),
                });
            }
        }

        let tensors = infos
            .into_iter()
            .map(|(name, info)| {
                let data = payload[info.begin as usize..info.end as usize].to_vec();
                let entry = TensorEntry {
                    dtype: info.dtype,
                    shape: info.shape,
                    data,
                };
                (name, entry)
            })
            .collect();
        Ok(Checkpoint { tensors, metadata })
    }

    /// Canonical serialization; a pure function of the checkpoint's content.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::from("{");
        let mut first = true;
        let mut push_key = |header: &mut String, key: &str| {
            if !first {
                header.push(',');
            }
            first = false;
            header.push_str(&serde_json::to_string(key).expect("string serializes"));
            header.push(':');
        };
        if !self.metadata.is_empty() {
            push_key(&mut header, METADATA_KEY);
            header.push_str(&serde_json::to_string(&self.metadata).expect("map serializes"));
        }
        let mut offset = 0usize;
        for (name, entry) in &self.tensors {
            push_key(&mut header, name);
            let end = offset + entry.data.len();
            let shape = entry
                .shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(",");
            header.push_str(&format!(
                "{{\"dtype\":\"{}\",\"shape\":[{}],\"data_offsets\":[{},{}]}}",
                entry.dtype, shape, offset, end
            ));
            offset = end;
        }
        header.push('}');
        while header.len() % HEADER_ALIGN != 0 {
            header.push(' ');
        }

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for entry in self.tensors.values() {
            out.extend_from_slice(&entry.data);
        }
        out
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TensorError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), TensorError> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct TensorInfo {
    dtype: DType,
    shape: Vec<usize>,
    begin: u64,
    end: u64,
}

#[derive(Deserialize)]
struct RawInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: (u64, u64),
}

fn parse_info(name: &str, value: Value) -> Result<TensorInfo, TensorError> {
    let raw: RawInfo = serde_json::from_value(value)
        .map_err(|e| TensorError::MalformedHeader(format!("tensor `{name}`: {e}")))?;
    let dtype = DType::parse(&raw.dtype).ok_or_else(|| TensorError::UnsupportedDtype {
        name: name.to_string(),
        dtype: raw.dtype.clone(),
    })?;
    Ok(TensorInfo {
        dtype,
        shape: raw.shape,
        begin: raw.data_offsets.0,
        end: raw.data_offsets.1,
    })
}

fn parse_metadata(value: Value) -> Result<BTreeMap<String, String>, TensorError> {
    serde_json::from_value(value)
        .map_err(|e| TensorError::MalformedHeader(format!("{METADATA_KEY}: {e}")))
}

/// Header object as an ordered list of entries, so duplicate keys survive
/// parsing and can be reported instead of silently overwritten.
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor descriptors")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawHeader, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    entries.push((k, v));
                }
                Ok(RawHeader(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}
