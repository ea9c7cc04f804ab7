//! Code-quality diagnostics: collision rate, prefix coherence, per-stage
//! residual norms, and the (M, K) sweep harness.

use std::collections::HashMap;

use super::{assign_all, assign_sid, train_residual_kmeans, Codebook, QuantizerError, SemanticId, TrainConfig};
use crate::embedding::EmbeddingMatrix;

/// Fraction of items whose tuple is shared by at least two items.
pub fn collision_rate(sids: &[SemanticId]) -> Result<f64, QuantizerError> {
    if sids.is_empty() {
        return Err(QuantizerError::EmptyInput);
    }
    let mut counts: HashMap<&SemanticId, usize> = HashMap::new();
    for sid in sids {
        *counts.entry(sid).or_insert(0) += 1;
    }
    let colliding: usize = counts.values().filter(|&&c| c >= 2).sum();
    Ok(colliding as f64 / sids.len() as f64)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        dot += *x as f64 * *y as f64;
        na += (*x as f64).powi(2);
        nb += (*y as f64).powi(2);
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Average cosine similarity among items sharing the same code prefix:
/// groups items by their first `prefix_len` codes, averages all pairwise
/// cosines within each group of two or more, then takes the unweighted mean
/// over groups.
pub fn prefix_coherence(
    matrix: &EmbeddingMatrix,
    sids: &[SemanticId],
    prefix_len: usize,
) -> Result<f64, QuantizerError> {
    if sids.is_empty() || matrix.count() != sids.len() {
        return Err(QuantizerError::EmptyInput);
    }
    let m = sids[0].len();
    if prefix_len == 0 || prefix_len > m {
        return Err(QuantizerError::BadPrefixLen { prefix_len, m });
    }
    let mut groups: HashMap<&[u32], Vec<usize>> = HashMap::new();
    for (i, sid) in sids.iter().enumerate() {
        groups.entry(&sid.codes()[..prefix_len]).or_default().push(i);
    }
    let mut group_means = Vec::new();
    for members in groups.values() {
        if members.len() < 2 {
            continue;
        }
        let mut sum = 0.0f64;
        let mut pairs = 0usize;
        for (ai, &a) in members.iter().enumerate() {
            for &b in &members[ai + 1..] {
                sum += cosine(matrix.row(a), matrix.row(b));
                pairs += 1;
            }
        }
        group_means.push(sum / pairs as f64);
    }
    if group_means.is_empty() {
        return Err(QuantizerError::NoSharedPrefixes);
    }
    Ok(group_means.iter().sum::<f64>() / group_means.len() as f64)
}

/// Mean squared residual norm after each stage, in stage order. Entry m is
/// the mean of ||r_{m+1}||^2 over all rows, so a healthy codebook yields a
/// non-increasing sequence.
pub fn stage_mean_squared_residuals(
    cb: &Codebook,
    matrix: &EmbeddingMatrix,
) -> Result<Vec<f64>, QuantizerError> {
    if matrix.count() == 0 {
        return Err(QuantizerError::EmptyInput);
    }
    let mut sums = vec![0.0f64; cb.stages()];
    for row in matrix.rows() {
        let sid = assign_sid(cb, row)?;
        let mut residual: Vec<f64> = row.iter().map(|v| *v as f64).collect();
        for (stage, &code) in sid.codes().iter().enumerate() {
            let c = cb.centroid(stage, code as usize);
            for (r, cv) in residual.iter_mut().zip(c.iter()) {
                *r -= *cv as f64;
            }
            sums[stage] += residual.iter().map(|r| r * r).sum::<f64>();
        }
    }
    let n = matrix.count() as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

/// One row of the configuration sweep: collision rate plus prefix coherence
/// at every prefix length (None when no prefix is shared).
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub m: usize,
    pub k: usize,
    pub collision_rate: f64,
    pub prefix_coherence: Vec<Option<f64>>,
}

/// Trains one codebook per (M, K) candidate with the fixed seed in `config`
/// and reports the selection diagnostics for each.
pub fn sweep_configs(
    matrix: &EmbeddingMatrix,
    candidates: &[(usize, usize)],
    config: TrainConfig,
) -> Result<Vec<SweepRow>, QuantizerError> {
    let mut rows = Vec::with_capacity(candidates.len());
    for &(m, k) in candidates {
        let cb = train_residual_kmeans(matrix, m, k, config)?;
        let sids = assign_all(&cb, matrix)?;
        let rate = collision_rate(&sids)?;
        let mut coherence = Vec::with_capacity(m);
        for prefix_len in 1..=m {
            match prefix_coherence(matrix, &sids, prefix_len) {
                Ok(v) => coherence.push(Some(v)),
                Err(QuantizerError::NoSharedPrefixes) => coherence.push(None),
                Err(e) => return Err(e),
            }
        }
        rows.push(SweepRow {
            m,
            k,
            collision_rate: rate,
            prefix_coherence: coherence,
        });
    }
    Ok(rows)
}
