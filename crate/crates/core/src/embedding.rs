//! Content-embedding storage: per-type matrices, pooling, Matryoshka-style
//! truncation, and L2 normalization.
//!
//! Embeddings arrive precomputed. The binary file layout is magic `SIDE`,
//! format version `u32`, dim `u32`, count `u64`, then `count * dim`
//! little-endian `f32` values. Row ids live in a companion UTF-8 file at
//! `<path>.ids`, one id per line, same order.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"SIDE";
pub const EMBEDDING_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: String, reason: String },
    #[error("{path}: truncated payload: declared {declared} rows but payload holds {actual}")]
    TruncatedPayload {
        path: String,
        declared: u64,
        actual: u64,
    },
    #[error("{path}: id file lists {ids} ids but matrix holds {rows} rows")]
    IdCountMismatch {
        path: String,
        ids: usize,
        rows: usize,
    },
    #[error("non-finite value at row {row} (item {item_id})")]
    NonFinite { row: usize, item_id: String },
    #[error("duplicate item id {item_id} at row {row}")]
    DuplicateId { row: usize, item_id: String },
    #[error("dim must be positive")]
    ZeroDim,
    #[error("row count {rows} does not match id count {ids}")]
    ShapeMismatch { rows: usize, ids: usize },
    #[error("mean_pool requires a non-empty input set")]
    EmptyPool,
    #[error("mean_pool rows have mixed dims: {a} vs {b}")]
    MixedDims { a: usize, b: usize },
    #[error("target_dim {target} out of range for dim {dim}")]
    BadTargetDim { target: usize, dim: usize },
    #[error("item {item_id}: truncated prefix is the zero vector")]
    ZeroPrefix { item_id: String },
}

/// Dense per-item content vectors for one item type, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    item_type: String,
    dim: usize,
    item_ids: Vec<String>,
    values: Vec<f32>,
}

impl EmbeddingMatrix {
    /// Builds a matrix, checking shape, id uniqueness, and finiteness.
    pub fn new(
        item_type: impl Into<String>,
        dim: usize,
        item_ids: Vec<String>,
        values: Vec<f32>,
    ) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        if values.len() != dim * item_ids.len() {
            return Err(EmbeddingError::ShapeMismatch {
                rows: values.len() / dim,
                ids: item_ids.len(),
            });
        }
        let mut seen = std::collections::HashSet::with_capacity(item_ids.len());
        for (row, id) in item_ids.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(EmbeddingError::DuplicateId {
                    row,
                    item_id: id.clone(),
                });
            }
        }
        for (row, chunk) in values.chunks_exact(dim).enumerate() {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFinite {
                    row,
                    item_id: item_ids[row].clone(),
                });
            }
        }
        Ok(Self {
            item_type: item_type.into(),
            dim,
            item_ids,
            values,
        })
    }

    pub fn item_type(&self) -> &str {
        &self.item_type
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.item_ids.len()
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Row index of `item_id`, linear scan.
    pub fn find(&self, item_id: &str) -> Option<usize> {
        self.item_ids.iter().position(|id| id == item_id)
    }
}

/// Quantization geometry for one item type: source/target dims and the
/// codebook shape (M stages of K codes).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemTypeSpace {
    pub item_type: String,
    pub source_dim: usize,
    pub target_dim: usize,
    pub m: usize,
    pub k: usize,
}

impl ItemTypeSpace {
    pub fn new(
        item_type: impl Into<String>,
        source_dim: usize,
        target_dim: usize,
        m: usize,
        k: usize,
    ) -> Result<Self, EmbeddingError> {
        if target_dim == 0 || target_dim > source_dim {
            return Err(EmbeddingError::BadTargetDim {
                target: target_dim,
                dim: source_dim,
            });
        }
        if m < 1 || k < 2 {
            return Err(EmbeddingError::MalformedHeader {
                path: String::new(),
                reason: format!("invalid codebook shape M={m}, K={k} (need M >= 1, K >= 2)"),
            });
        }
        Ok(Self {
            item_type: item_type.into(),
            source_dim,
            target_dim,
            m,
            k,
        })
    }
}

fn ids_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    s.into()
}

fn io_err(path: &Path, source: std::io::Error) -> EmbeddingError {
    EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads an embedding matrix and its companion id file.
pub fn load_embeddings(path: &Path, item_type: &str) -> Result<EmbeddingMatrix, EmbeddingError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let p = path.display().to_string();
    if bytes.len() < 20 {
        return Err(EmbeddingError::MalformedHeader {
            path: p,
            reason: format!("file too short for header ({} bytes)", bytes.len()),
        });
    }
    if &bytes[0..4] != EMBEDDING_MAGIC {
        return Err(EmbeddingError::MalformedHeader {
            path: p,
            reason: format!("bad magic {:?}", &bytes[0..4]),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != EMBEDDING_FORMAT_VERSION {
        return Err(EmbeddingError::MalformedHeader {
            path: p,
            reason: format!("unsupported format version {version}"),
        });
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if dim == 0 {
        return Err(EmbeddingError::MalformedHeader {
            path: p,
            reason: "dim is zero".into(),
        });
    }
    let payload = &bytes[20..];
    let expected = count as usize * dim * 4;
    if payload.len() != expected {
        return Err(EmbeddingError::TruncatedPayload {
            path: p,
            declared: count,
            actual: (payload.len() / (dim * 4)) as u64,
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let idp = ids_path(path);
    let id_text = fs::read_to_string(&idp).map_err(|e| io_err(&idp, e))?;
    let item_ids: Vec<String> = id_text.lines().map(|l| l.to_string()).collect();
    if item_ids.len() != count as usize {
        return Err(EmbeddingError::IdCountMismatch {
            path: idp.display().to_string(),
            ids: item_ids.len(),
            rows: count as usize,
        });
    }
    EmbeddingMatrix::new(item_type, dim, item_ids, values)
}

/// Writes a matrix in the binary format plus the companion id file.
/// `store(load(f))` is byte-identical to `f`.
pub fn store_embeddings(path: &Path, matrix: &EmbeddingMatrix) -> Result<(), EmbeddingError> {
    let mut out = Vec::with_capacity(20 + matrix.values.len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(matrix.dim as u32).to_le_bytes());
    out.extend_from_slice(&(matrix.count() as u64).to_le_bytes());
    for v in &matrix.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, &out).map_err(|e| io_err(path, e))?;

    let idp = ids_path(path);
    let mut f = fs::File::create(&idp).map_err(|e| io_err(&idp, e))?;
    for id in &matrix.item_ids {
        writeln!(f, "{id}").map_err(|e| io_err(&idp, e))?;
    }
    Ok(())
}

/// Elementwise arithmetic mean of the rows, accumulated in f64.
pub fn mean_pool(rows: &[&[f32]]) -> Result<Vec<f32>, EmbeddingError> {
    let first = rows.first().ok_or(EmbeddingError::EmptyPool)?;
    let dim = first.len();
    for r in rows {
        if r.len() != dim {
            return Err(EmbeddingError::MixedDims { a: dim, b: r.len() });
        }
    }
    let mut acc = vec![0.0f64; dim];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r.iter()) {
            *a += *v as f64;
        }
    }
    let n = rows.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Keeps the first `target_dim` components of every row and L2-normalizes
/// each truncated row to unit norm. A row whose truncated prefix is the zero
/// vector is a hard error naming the item, never a silent drop.
pub fn truncate_and_normalize(
    matrix: &EmbeddingMatrix,
    target_dim: usize,
) -> Result<EmbeddingMatrix, EmbeddingError> {
    if target_dim == 0 || target_dim > matrix.dim {
        return Err(EmbeddingError::BadTargetDim {
            target: target_dim,
            dim: matrix.dim,
        });
    }
    let mut values = Vec::with_capacity(matrix.count() * target_dim);
    for (row, id) in matrix.rows().zip(matrix.item_ids.iter()) {
        let prefix = &row[..target_dim];
        let norm: f64 = prefix.iter().map(|v| (*v as f64) * (*v as f64)).sum();
        let norm = norm.sqrt();
        if norm == 0.0 {
            return Err(EmbeddingError::ZeroPrefix {
                item_id: id.clone(),
            });
        }
        values.extend(prefix.iter().map(|v| (*v as f64 / norm) as f32));
    }
    EmbeddingMatrix::new(
        matrix.item_type.clone(),
        target_dim,
        matrix.item_ids.clone(),
        values,
    )
}
