//! Discrete item codes: residual K-means codebooks (learned) and LSH
//! signatures (random-projection baseline), plus assignment, reconstruction,
//! and code-quality diagnostics.

mod diagnostics;
mod kmeans;
mod lsh;

pub use diagnostics::{
    collision_rate, prefix_coherence, stage_mean_squared_residuals, sweep_configs, SweepRow,
};
pub use kmeans::train_residual_kmeans;
pub use lsh::{assign_lsh_sid, load_lsh, store_lsh, train_lsh, LshPlanes, LSH_MAGIC};

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::embedding::EmbeddingMatrix;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"SIDC";
pub const CODEBOOK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum QuantizerError {
    #[error("training needs at least K={k} points, got {count}")]
    TooFewPoints { k: usize, count: usize },
    #[error("stage {stage} has only {distinct} distinct residual points for K={k}; use a smaller K")]
    TooFewDistinct {
        stage: usize,
        distinct: usize,
        k: usize,
    },
    #[error("invalid shape: M={m}, K={k} (need M >= 1, K >= 2)")]
    BadShape { m: usize, k: usize },
    #[error("dimension mismatch: codebook dim {expected}, input dim {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("code {code} out of range for K={k} at position {position}")]
    CodeOutOfRange {
        code: u32,
        k: usize,
        position: usize,
    },
    #[error("semantic id has {actual} codes, codebook has M={expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("bits must be >= 1")]
    ZeroBits,
    #[error("dim must be >= 1")]
    ZeroDim,
    #[error("K={k} is not a power of two")]
    NotPowerOfTwo { k: usize },
    #[error("planes hold {bits} bits but M={m} positions of {b} bits need {need}")]
    BitCountMismatch {
        bits: usize,
        m: usize,
        b: usize,
        need: usize,
    },
    #[error("prefix_len {prefix_len} out of range for M={m}")]
    BadPrefixLen { prefix_len: usize, m: usize },
    #[error("no shared prefixes: every prefix group has a single member")]
    NoSharedPrefixes,
    #[error("empty input")]
    EmptyInput,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed codebook file: {reason}")]
    MalformedFile { path: String, reason: String },
}

/// An ordered tuple of discrete codes, one per codebook stage.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SemanticId {
    codes: Vec<u32>,
}

impl SemanticId {
    pub fn new(codes: Vec<u32>) -> Self {
        Self { codes }
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

impl std::fmt::Display for SemanticId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.codes.iter().map(|c| c.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Residual K-means training knobs. Convergence stops when the relative
/// inertia improvement drops below `tolerance` or `max_iters` is reached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iters: 100,
            tolerance: 1e-4,
        }
    }
}

/// M stages of K centroids each; stage m quantizes the residual left by
/// stage m-1.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    item_type: String,
    m: usize,
    k: usize,
    dim: usize,
    /// Stage-major: `centroids[((m * K) + j) * dim ..]` is centroid j of stage m.
    centroids: Vec<f32>,
    train_config: TrainConfig,
}

impl Codebook {
    pub fn new(
        item_type: impl Into<String>,
        m: usize,
        k: usize,
        dim: usize,
        centroids: Vec<f32>,
        train_config: TrainConfig,
    ) -> Result<Self, QuantizerError> {
        if m < 1 || k < 2 {
            return Err(QuantizerError::BadShape { m, k });
        }
        if centroids.len() != m * k * dim {
            return Err(QuantizerError::MalformedFile {
                path: String::new(),
                reason: format!(
                    "centroid buffer holds {} floats, shape needs {}",
                    centroids.len(),
                    m * k * dim
                ),
            });
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(QuantizerError::MalformedFile {
                path: String::new(),
                reason: "non-finite centroid".into(),
            });
        }
        Ok(Self {
            item_type: item_type.into(),
            m,
            k,
            dim,
            centroids,
            train_config,
        })
    }

    pub fn item_type(&self) -> &str {
        &self.item_type
    }

    pub fn stages(&self) -> usize {
        self.m
    }

    pub fn codes_per_stage(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train_config
    }

    pub fn centroid(&self, stage: usize, code: usize) -> &[f32] {
        let start = ((stage * self.k) + code) * self.dim;
        &self.centroids[start..start + self.dim]
    }

    pub(crate) fn stage_centroids(&self, stage: usize) -> &[f32] {
        let start = stage * self.k * self.dim;
        &self.centroids[start..start + self.k * self.dim]
    }
}

pub(crate) fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

/// Index of the nearest centroid in a flat `[K * dim]` buffer; ties break to
/// the lowest index.
pub(crate) fn nearest_centroid(point: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_distance(point, c);
        if d < best_dist {
            best_dist = d;
            best = j;
        }
    }
    (best, best_dist)
}

/// Assigns the semantic id of `x`: at each stage the closest centroid to the
/// running residual, ties to the lowest index. Deterministic.
pub fn assign_sid(cb: &Codebook, x: &[f32]) -> Result<SemanticId, QuantizerError> {
    if x.len() != cb.dim {
        return Err(QuantizerError::DimMismatch {
            expected: cb.dim,
            actual: x.len(),
        });
    }
    let mut residual: Vec<f32> = x.to_vec();
    let mut codes = Vec::with_capacity(cb.m);
    for stage in 0..cb.m {
        let (j, _) = nearest_centroid(&residual, cb.stage_centroids(stage), cb.dim);
        let centroid = cb.centroid(stage, j);
        for (r, c) in residual.iter_mut().zip(centroid.iter()) {
            *r -= *c;
        }
        codes.push(j as u32);
    }
    Ok(SemanticId::new(codes))
}

/// Sum of the selected centroids across stages.
pub fn reconstruct(cb: &Codebook, sid: &SemanticId) -> Result<Vec<f32>, QuantizerError> {
    if sid.len() != cb.m {
        return Err(QuantizerError::LengthMismatch {
            expected: cb.m,
            actual: sid.len(),
        });
    }
    let mut out = vec![0.0f32; cb.dim];
    for (stage, &code) in sid.codes().iter().enumerate() {
        if code as usize >= cb.k {
            return Err(QuantizerError::CodeOutOfRange {
                code,
                k: cb.k,
                position: stage + 1,
            });
        }
        for (o, c) in out.iter_mut().zip(cb.centroid(stage, code as usize)) {
            *o += *c;
        }
    }
    Ok(out)
}

/// Assigns semantic ids for every row of the matrix, in row order.
pub fn assign_all(cb: &Codebook, matrix: &EmbeddingMatrix) -> Result<Vec<SemanticId>, QuantizerError> {
    matrix.rows().map(|row| assign_sid(cb, row)).collect()
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn read_str(bytes: &[u8], pos: &mut usize, path: &str) -> Result<String, QuantizerError> {
    let err = |reason: &str| QuantizerError::MalformedFile {
        path: path.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < *pos + 4 {
        return Err(err("truncated string length"));
    }
    let len = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap()) as usize;
    *pos += 4;
    if bytes.len() < *pos + len {
        return Err(err("truncated string payload"));
    }
    let s = std::str::from_utf8(&bytes[*pos..*pos + len])
        .map_err(|_| err("string is not UTF-8"))?
        .to_string();
    *pos += len;
    Ok(s)
}

/// Codebook binary format: magic `SIDC`, version u32, item_type
/// (length-prefixed UTF-8), M u32, K u32, dim u32, seed u64, then
/// M*K*dim little-endian f32 centroids.
pub fn store_codebook(path: &Path, cb: &Codebook) -> Result<(), QuantizerError> {
    let mut out = Vec::new();
    out.extend_from_slice(CODEBOOK_MAGIC);
    out.extend_from_slice(&CODEBOOK_FORMAT_VERSION.to_le_bytes());
    write_str(&mut out, &cb.item_type);
    out.extend_from_slice(&(cb.m as u32).to_le_bytes());
    out.extend_from_slice(&(cb.k as u32).to_le_bytes());
    out.extend_from_slice(&(cb.dim as u32).to_le_bytes());
    out.extend_from_slice(&cb.train_config.seed.to_le_bytes());
    for v in &cb.centroids {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, &out).map_err(|e| QuantizerError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_codebook(path: &Path) -> Result<Codebook, QuantizerError> {
    let bytes = fs::read(path).map_err(|e| QuantizerError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let p = path.display().to_string();
    let err = |reason: &str| QuantizerError::MalformedFile {
        path: p.clone(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 || &bytes[0..4] != CODEBOOK_MAGIC {
        return Err(err("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CODEBOOK_FORMAT_VERSION {
        return Err(err(&format!("unsupported version {version}")));
    }
    let mut pos = 8usize;
    let item_type = read_str(&bytes, &mut pos, &p)?;
    if bytes.len() < pos + 12 + 8 {
        return Err(err("truncated header"));
    }
    let m = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[pos + 8..pos + 12].try_into().unwrap()) as usize;
    pos += 12;
    let seed = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
    pos += 8;
    let need = m * k * dim * 4;
    if bytes.len() != pos + need {
        return Err(err(&format!(
            "payload holds {} bytes, shape needs {}",
            bytes.len() - pos,
            need
        )));
    }
    let centroids: Vec<f32> = bytes[pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    // max_iters/tolerance are not persisted; only the seed identifies the run.
    let train_config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    Codebook::new(item_type, m, k, dim, centroids, train_config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_codebook() -> Codebook {
        // stage 1: {(0,0), (4,4)}; stage 2: {(0,0), (1,0)}
        Codebook::new(
            "test",
            2,
            2,
            2,
            vec![0.0, 0.0, 4.0, 4.0, 0.0, 0.0, 1.0, 0.0],
            TrainConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn assign_walks_residuals() {
        let cb = toy_codebook();
        // x=(5,4): nearest stage-1 is (4,4) -> code 1; residual (1,0) -> code 1
        let sid = assign_sid(&cb, &[5.0, 4.0]).unwrap();
        assert_eq!(sid.codes(), &[1, 1]);
    }

    #[test]
    fn assign_exact_centroid_gives_zero_residual_path() {
        let cb = toy_codebook();
        let sid = assign_sid(&cb, &[4.0, 4.0]).unwrap();
        assert_eq!(sid.codes(), &[1, 0]);
    }

    #[test]
    fn assign_tie_breaks_to_lowest_index() {
        // centroids 0..6 on a line; point equidistant between 2 and 5 is 3.5,
        // but nearest set {3,4} ties at 3.5 -> build explicit tie between j=2 and j=5
        let mut centroids = vec![0.0f32; 6 * 1];
        centroids[2] = 1.0;
        centroids[5] = 3.0;
        for (j, c) in centroids.iter_mut().enumerate() {
            if j != 2 && j != 5 {
                *c = 100.0 + j as f32;
            }
        }
        let cb = Codebook::new("test", 1, 6, 1, centroids, TrainConfig::default()).unwrap();
        let sid = assign_sid(&cb, &[2.0]).unwrap();
        assert_eq!(sid.codes(), &[2]);
    }

    #[test]
    fn assign_rejects_dim_mismatch() {
        let cb = toy_codebook();
        assert!(matches!(
            assign_sid(&cb, &[1.0, 2.0, 3.0]),
            Err(QuantizerError::DimMismatch { .. })
        ));
    }

    #[test]
    fn reconstruct_sums_centroids() {
        let cb = toy_codebook();
        let r = reconstruct(&cb, &SemanticId::new(vec![1, 1])).unwrap();
        assert_eq!(r, vec![5.0, 4.0]);

        let zeros = Codebook::new(
            "z",
            2,
            2,
            2,
            vec![0.0; 8],
            TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(
            reconstruct(&zeros, &SemanticId::new(vec![1, 0])).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn reconstruct_rejects_out_of_range() {
        let cb = toy_codebook();
        assert!(matches!(
            reconstruct(&cb, &SemanticId::new(vec![0, 2])),
            Err(QuantizerError::CodeOutOfRange { .. })
        ));
    }

    #[test]
    fn codebook_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.sidc");
        let cb = toy_codebook();
        store_codebook(&path, &cb).unwrap();
        let back = load_codebook(&path).unwrap();
        assert_eq!(back.item_type(), "test");
        assert_eq!(back.stages(), 2);
        assert_eq!(back.codes_per_stage(), 2);
        assert_eq!(back.dim(), 2);
        assert_eq!(back.centroids, cb.centroids);
    }
}
