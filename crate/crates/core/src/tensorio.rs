//! Persistence layer: EMBD embedding matrices and JSON vocabularies.
//!
//! EMBD is a minimal little-endian container, the toolkit's only on-disk
//! tensor format:
//!
//! ```text
//! magic   4 bytes  "EMBD"
//! version u32      1
//! dtype   u32      0 (f32)
//! rows    u64
//! dims    u64
//! data    rows * dims * f32, row-major
//! ```
//!
//! No padding, no trailer. Values are stored as 32-bit floats; loading into
//! `f64` storage widens exactly, saving from `f64` storage narrows to `f32`.
//!
//! Vocabularies are single UTF-8 JSON objects mapping token surface string to
//! integer id. Token strings are matched byte-exact everywhere in the
//! toolkit; no Unicode normalization, no marker stripping.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use thiserror::Error;

use crate::scalar::Scalar;

const MAGIC: [u8; 4] = *b"EMBD";
const VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;
const HEADER_LEN: u64 = 4 + 4 + 4 + 8 + 8;

/// Errors raised by the persistence layer. Each malformed-input class gets
/// its own variant so callers can assert on the exact failure mode.
#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected \"EMBD\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {found} (expected {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("unsupported dtype code {found} (only 0 = f32 is defined)")]
    UnsupportedDtype { found: u32 },
    #[error("truncated payload: header declares {expected} bytes of data, file holds {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("trailing bytes after payload: header declares {expected} bytes of data")]
    TrailingBytes { expected: u64 },
    #[error("rows ({rows}) x dims ({dims}) overflows the addressable size")]
    SizeOverflow { rows: u64, dims: u64 },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("data length {actual} does not match rows x dims = {expected}")]
    DataLength { expected: usize, actual: usize },
    #[error("malformed vocabulary: {detail}")]
    MalformedVocab { detail: String },
    #[error("duplicate token string {token:?} in vocabulary")]
    DuplicateToken { token: String },
    #[error("duplicate token id {id} (held by both {first:?} and {second:?})")]
    DuplicateId {
        id: usize,
        first: String,
        second: String,
    },
    #[error("token {token:?} has id {id}, out of range for a matrix with {rows} rows")]
    IdOutOfRange {
        token: String,
        id: usize,
        rows: usize,
    },
}

fn io_err(path: &Path, source: io::Error) -> TensorIoError {
    TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Dense row-major matrix of token embeddings.
///
/// Row `t` is the embedding of token id `t`. Every stored value is finite
/// after a successful load.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<T> {
    rows: usize,
    dims: usize,
    data: Vec<T>,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    /// Build a matrix from row-major data. Fails if the length does not
    /// match `rows * dims`.
    pub fn from_vec(rows: usize, dims: usize, data: Vec<T>) -> Result<Self, TensorIoError> {
        let expected = rows
            .checked_mul(dims)
            .ok_or(TensorIoError::SizeOverflow {
                rows: rows as u64,
                dims: dims as u64,
            })?;
        if data.len() != expected {
            return Err(TensorIoError::DataLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { rows, dims, data })
    }

    /// Build a matrix from per-row vectors; all rows must share one length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, TensorIoError> {
        let dims = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dims);
        for row in rows {
            if row.len() != dims {
                return Err(TensorIoError::DataLength {
                    expected: dims,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), dims, data)
    }

    pub fn zeros(rows: usize, dims: usize) -> Self {
        Self {
            rows,
            dims,
            data: vec![T::zero(); rows * dims],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Embedding of token id `index`. Panics if `index >= rows`.
    pub fn row(&self, index: usize) -> &[T] {
        let start = index * self.dims;
        &self.data[start..start + self.dims]
    }

    /// First non-finite entry, if any.
    pub fn find_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|pos| (pos / self.dims.max(1), pos % self.dims.max(1)))
    }
}

/// Load an EMBD file. Rejects malformed headers, truncated or oversized
/// payloads, and non-finite values; never yields a partial matrix.
pub fn load_embeddings<T: Scalar>(path: impl AsRef<Path>) -> Result<EmbeddingMatrix<T>, TensorIoError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let file_len = file.metadata().map_err(|e| io_err(path, e))?.len();
    let mut reader = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut reader, &mut magic, path, file_len)?;
    if magic != MAGIC {
        return Err(TensorIoError::BadMagic { found: magic });
    }
    let version = read_u32(&mut reader, path, file_len)?;
    if version != VERSION {
        return Err(TensorIoError::UnsupportedVersion { found: version });
    }
    let dtype = read_u32(&mut reader, path, file_len)?;
    if dtype != DTYPE_F32 {
        return Err(TensorIoError::UnsupportedDtype { found: dtype });
    }
    let rows_u64 = read_u64(&mut reader, path, file_len)?;
    let dims_u64 = read_u64(&mut reader, path, file_len)?;

    let count = rows_u64
        .checked_mul(dims_u64)
        .and_then(|c| c.checked_mul(4))
        .ok_or(TensorIoError::SizeOverflow {
            rows: rows_u64,
            dims: dims_u64,
        })?;
    let expected = count;
    let actual_payload = file_len.saturating_sub(HEADER_LEN);
    if actual_payload < expected {
        return Err(TensorIoError::Truncated {
            expected,
            actual: actual_payload,
        });
    }
    if actual_payload > expected {
        return Err(TensorIoError::TrailingBytes { expected });
    }

    let rows = rows_u64 as usize;
    let dims = dims_u64 as usize;
    let mut data: Vec<T> = Vec::with_capacity(rows * dims);
    let mut buf = vec![0u8; 1 << 16];
    let mut remaining = expected;
    while remaining > 0 {
        let take = remaining.min(buf.len() as u64) as usize;
        reader
            .read_exact(&mut buf[..take])
            .map_err(|e| io_err(path, e))?;
        for chunk in buf[..take].chunks_exact(4) {
            let value = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            data.push(T::from_storage(value));
        }
        remaining -= take as u64;
    }

    let matrix = EmbeddingMatrix { rows, dims, data };
    if let Some((row, col)) = matrix.find_non_finite() {
        return Err(TensorIoError::NonFinite { row, col });
    }
    Ok(matrix)
}

/// Save a matrix as an EMBD file. Writes to a temporary file in the target
/// directory and renames into place, so the destination is never partial.
pub fn save_embeddings<T: Scalar>(
    matrix: &EmbeddingMatrix<T>,
    path: impl AsRef<Path>,
) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(dir) => tempfile::NamedTempFile::new_in(dir),
        None => tempfile::NamedTempFile::new_in("."),
    }
    .map_err(|e| io_err(path, e))?;

    {
        let mut writer = BufWriter::new(tmp.as_file());
        writer.write_all(&MAGIC).map_err(|e| io_err(path, e))?;
        writer
            .write_all(&VERSION.to_le_bytes())
            .map_err(|e| io_err(path, e))?;
        writer
            .write_all(&DTYPE_F32.to_le_bytes())
            .map_err(|e| io_err(path, e))?;
        writer
            .write_all(&(matrix.rows as u64).to_le_bytes())
            .map_err(|e| io_err(path, e))?;
        writer
            .write_all(&(matrix.dims as u64).to_le_bytes())
            .map_err(|e| io_err(path, e))?;
        let mut buf = Vec::with_capacity(1 << 16);
        for value in &matrix.data {
            buf.extend_from_slice(&value.to_storage().to_le_bytes());
            if buf.len() >= (1 << 16) {
                writer.write_all(&buf).map_err(|e| io_err(path, e))?;
                buf.clear();
            }
        }
        writer.write_all(&buf).map_err(|e| io_err(path, e))?;
        writer.flush().map_err(|e| io_err(path, e))?;
    }
    tmp.persist(path)
        .map_err(|e| io_err(path, e.error))?;
    Ok(())
}

fn read_exact_or_truncated(
    reader: &mut impl Read,
    buf: &mut [u8],
    path: &Path,
    file_len: u64,
) -> Result<(), TensorIoError> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            TensorIoError::Truncated {
                expected: HEADER_LEN,
                actual: file_len,
            }
        } else {
            io_err(path, e)
        }
    })
}

fn read_u32(reader: &mut impl Read, path: &Path, file_len: u64) -> Result<u32, TensorIoError> {
    let mut buf = [0u8; 4];
    read_exact_or_truncated(reader, &mut buf, path, file_len)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(reader: &mut impl Read, path: &Path, file_len: u64) -> Result<u64, TensorIoError> {
    let mut buf = [0u8; 8];
    read_exact_or_truncated(reader, &mut buf, path, file_len)?;
    Ok(u64::from_le_bytes(buf))
}

/// Bijection between token surface strings and token ids.
///
/// Ids are unique but need not be contiguous; they must stay below the row
/// count of any paired embedding matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vocabulary {
    by_token: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from (token, id) pairs, rejecting duplicate strings and ids.
    pub fn from_entries<I, S>(entries: I) -> Result<Self, TensorIoError>
    where
        I: IntoIterator<Item = (S, usize)>,
        S: Into<String>,
    {
        let mut by_token = HashMap::new();
        let mut by_id: HashMap<usize, String> = HashMap::new();
        for (token, id) in entries {
            let token = token.into();
            if let Some(first) = by_id.get(&id) {
                return Err(TensorIoError::DuplicateId {
                    id,
                    first: first.clone(),
                    second: token,
                });
            }
            if by_token.contains_key(&token) {
                return Err(TensorIoError::DuplicateToken { token });
            }
            by_id.insert(id, token.clone());
            by_token.insert(token, id);
        }
        Ok(Self { by_token })
    }

    /// Parse the JSON vocabulary format, detecting duplicate keys that a
    /// plain map deserialization would silently collapse.
    pub fn from_json_str(text: &str) -> Result<Self, TensorIoError> {
        let mut deserializer = serde_json::Deserializer::from_str(text);
        let vocab = VocabDe::deserialize(&mut deserializer)
            .map_err(|e| match try_take_dup(&e) {
                Some(err) => err,
                None => TensorIoError::MalformedVocab {
                    detail: e.to_string(),
                },
            })?;
        deserializer
            .end()
            .map_err(|e| TensorIoError::MalformedVocab {
                detail: e.to_string(),
            })?;
        Ok(vocab.0)
    }

    pub fn len(&self) -> usize {
        self.by_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_token.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.by_token.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.by_token.contains_key(token)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.by_token.iter().map(|(t, &id)| (t.as_str(), id))
    }

    pub fn max_id(&self) -> Option<usize> {
        self.by_token.values().copied().max()
    }

    /// Ids form exactly `0..len()` with no gaps.
    pub fn ids_contiguous(&self) -> bool {
        match self.max_id() {
            None => true,
            Some(max) => max + 1 == self.len(),
        }
    }

    /// Check that every id addresses a row of a matrix with `rows` rows.
    pub fn check_rows(&self, rows: usize) -> Result<(), TensorIoError> {
        for (token, id) in self.iter() {
            if id >= rows {
                return Err(TensorIoError::IdOutOfRange {
                    token: token.to_owned(),
                    id,
                    rows,
                });
            }
        }
        Ok(())
    }

    /// Serialize to the JSON vocabulary format, entries sorted by id.
    pub fn to_json_string(&self) -> String {
        let mut entries: Vec<(&str, usize)> = self.iter().collect();
        entries.sort_by_key(|&(_, id)| id);
        let mut out = String::from("{");
        for (i, (token, id)) in entries.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&serde_json::to_string(token).expect("string serialization"));
            out.push(':');
            out.push_str(&id.to_string());
        }
        out.push('}');
        out
    }
}

/// Load and validate a vocabulary JSON file.
pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<Vocabulary, TensorIoError> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| io_err(path, e))?;
    Vocabulary::from_json_str(&text)
}

/// Write a vocabulary JSON file (entries sorted by id), atomically.
pub fn save_vocabulary(vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(dir) => tempfile::NamedTempFile::new_in(dir),
        None => tempfile::NamedTempFile::new_in("."),
    }
    .map_err(|e| io_err(path, e))?;
    tmp.as_file()
        .write_all(vocab.to_json_string().as_bytes())
        .map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

// Duplicate-token / duplicate-id detection has to happen inside the visitor;
// smuggle the structured error out through serde's string-only custom error.
// The payload is JSON-encoded so arbitrary token bytes survive the trip.
const DUP_TOKEN_TAG: &str = "__dup_token__:";
const DUP_ID_TAG: &str = "__dup_id__:";

fn first_json<T: serde::de::DeserializeOwned>(text: &str) -> Option<T> {
    serde_json::Deserializer::from_str(text)
        .into_iter()
        .next()?
        .ok()
}

fn try_take_dup(e: &serde_json::Error) -> Option<TensorIoError> {
    let msg = e.to_string();
    if let Some(rest) = msg.strip_prefix(DUP_TOKEN_TAG) {
        let token: String = first_json(rest)?;
        return Some(TensorIoError::DuplicateToken { token });
    }
    if let Some(rest) = msg.strip_prefix(DUP_ID_TAG) {
        let (id, first, second): (usize, String, String) = first_json(rest)?;
        return Some(TensorIoError::DuplicateId { id, first, second });
    }
    None
}

struct VocabDe(Vocabulary);

impl<'de> Deserialize<'de> for VocabDe {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = VocabDe;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object mapping token strings to integer ids")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut by_token: HashMap<String, usize> = HashMap::new();
                let mut by_id: HashMap<usize, String> = HashMap::new();
                while let Some((token, id)) = map.next_entry::<String, u64>()? {
                    let id = id as usize;
                    if by_token.contains_key(&token) {
                        let payload = serde_json::to_string(&token).expect("string");
                        return Err(de::Error::custom(format!("{DUP_TOKEN_TAG}{payload}")));
                    }
                    if let Some(first) = by_id.get(&id) {
                        let payload = serde_json::to_string(&(id, first, &token)).expect("tuple");
                        return Err(de::Error::custom(format!("{DUP_ID_TAG}{payload}")));
                    }
                    by_id.insert(id, token.clone());
                    by_token.insert(token, id);
                }
                Ok(VocabDe(Vocabulary { by_token }))
            }
        }
        deserializer.deserialize_map(V)
    }
}
