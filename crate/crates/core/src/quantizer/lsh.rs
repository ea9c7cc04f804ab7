//! Random-hyperplane LSH signatures: the data-independent quantizer used as
//! an ablation baseline against learned codebooks.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{QuantizerError, SemanticId};

pub const LSH_MAGIC: &[u8; 4] = b"SIDL";
pub const LSH_FORMAT_VERSION: u32 = 1;

/// A stack of random hyperplanes, one sign bit each.
#[derive(Debug, Clone, PartialEq)]
pub struct LshPlanes {
    item_type: String,
    bits: usize,
    dim: usize,
    /// Row-major `[bits x dim]`, sampled from a standard Gaussian.
    planes: Vec<f32>,
    seed: u64,
}

impl LshPlanes {
    pub fn item_type(&self) -> &str {
        &self.item_type
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn plane(&self, bit: usize) -> &[f32] {
        &self.planes[bit * self.dim..(bit + 1) * self.dim]
    }
}

/// Samples `bits` hyperplanes of dimension `dim` from a standard Gaussian,
/// deterministically under `seed`.
pub fn train_lsh(
    item_type: &str,
    dim: usize,
    bits: usize,
    seed: u64,
) -> Result<LshPlanes, QuantizerError> {
    if dim == 0 {
        return Err(QuantizerError::ZeroDim);
    }
    if bits == 0 {
        return Err(QuantizerError::ZeroBits);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planes: Vec<f32> = (0..bits * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Ok(LshPlanes {
        item_type: item_type.to_string(),
        bits,
        dim,
        planes,
        seed,
    })
}

/// Sign bit of one plane against `x`: `sgn(w . x)`, with sign at exactly
/// zero mapping to bit 1.
pub fn hash_bit(plane: &[f32], x: &[f32]) -> u8 {
    let dot: f64 = plane
        .iter()
        .zip(x.iter())
        .map(|(w, v)| *w as f64 * *v as f64)
        .sum();
    u8::from(dot >= 0.0)
}

/// Packs the plane sign bits into an M-tuple of codes: K must be a power of
/// two (K = 2^b) and the planes must hold exactly M*b bits. Groups of b
/// consecutive bits pack big-endian into each code.
pub fn assign_lsh_sid(
    planes: &LshPlanes,
    x: &[f32],
    m: usize,
    k: usize,
) -> Result<SemanticId, QuantizerError> {
    if x.len() != planes.dim {
        return Err(QuantizerError::DimMismatch {
            expected: planes.dim,
            actual: x.len(),
        });
    }
    if !k.is_power_of_two() || k < 2 {
        return Err(QuantizerError::NotPowerOfTwo { k });
    }
    let b = k.trailing_zeros() as usize;
    if planes.bits != m * b {
        return Err(QuantizerError::BitCountMismatch {
            bits: planes.bits,
            m,
            b,
            need: m * b,
        });
    }
    let mut codes = Vec::with_capacity(m);
    for pos in 0..m {
        let mut code = 0u32;
        for i in 0..b {
            let bit = hash_bit(planes.plane(pos * b + i), x);
            code = (code << 1) | bit as u32;
        }
        codes.push(code);
    }
    Ok(SemanticId::new(codes))
}

/// LSH plane file: magic `SIDL`, version u32, item_type (length-prefixed
/// UTF-8), bits u32, dim u32, seed u64, then bits*dim little-endian f32.
pub fn store_lsh(path: &Path, planes: &LshPlanes) -> Result<(), QuantizerError> {
    let mut out = Vec::new();
    out.extend_from_slice(LSH_MAGIC);
    out.extend_from_slice(&LSH_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(planes.item_type.len() as u32).to_le_bytes());
    out.extend_from_slice(planes.item_type.as_bytes());
    out.extend_from_slice(&(planes.bits as u32).to_le_bytes());
    out.extend_from_slice(&(planes.dim as u32).to_le_bytes());
    out.extend_from_slice(&planes.seed.to_le_bytes());
    for v in &planes.planes {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, &out).map_err(|e| QuantizerError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_lsh(path: &Path) -> Result<LshPlanes, QuantizerError> {
    let bytes = fs::read(path).map_err(|e| QuantizerError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let p = path.display().to_string();
    let err = |reason: &str| QuantizerError::MalformedFile {
        path: p.clone(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 || &bytes[0..4] != LSH_MAGIC {
        return Err(err("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != LSH_FORMAT_VERSION {
        return Err(err(&format!("unsupported version {version}")));
    }
    let mut pos = 8usize;
    let item_type = super::read_str(&bytes, &mut pos, &p)?;
    if bytes.len() < pos + 8 + 8 {
        return Err(err("truncated header"));
    }
    let bits = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
    pos += 8;
    let seed = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
    pos += 8;
    let need = bits * dim * 4;
    if bytes.len() != pos + need {
        return Err(err("payload size does not match declared shape"));
    }
    let planes: Vec<f32> = bytes[pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(LshPlanes {
        item_type,
        bits,
        dim,
        planes,
        seed,
    })
}
