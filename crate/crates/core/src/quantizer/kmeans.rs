//! Residual K-means training: stage m runs Lloyd iterations on the residuals
//! left by stage m-1, with k-means++ seeding and empty-cluster repair.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{nearest_centroid, squared_distance, Codebook, QuantizerError, TrainConfig};
use crate::embedding::EmbeddingMatrix;

/// Trains an M-stage codebook on the matrix rows. Fails when any stage sees
/// fewer distinct residual points than K.
pub fn train_residual_kmeans(
    matrix: &EmbeddingMatrix,
    m: usize,
    k: usize,
    config: TrainConfig,
) -> Result<Codebook, QuantizerError> {
    if m < 1 || k < 2 {
        return Err(QuantizerError::BadShape { m, k });
    }
    let count = matrix.count();
    if count < k {
        return Err(QuantizerError::TooFewPoints { k, count });
    }
    let dim = matrix.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut residuals: Vec<f32> = matrix.values().to_vec();
    let mut centroids = Vec::with_capacity(m * k * dim);

    for stage in 0..m {
        let distinct = count_distinct(&residuals, dim, k + 1);
        if distinct < k {
            return Err(QuantizerError::TooFewDistinct {
                stage: stage + 1,
                distinct,
                k,
            });
        }
        let stage_centroids = lloyd(&residuals, dim, k, &config, &mut rng);
        // subtract assigned centroids to form the next stage's residuals
        for point in residuals.chunks_exact_mut(dim) {
            let (j, _) = nearest_centroid(point, &stage_centroids, dim);
            let c = &stage_centroids[j * dim..(j + 1) * dim];
            for (p, cv) in point.iter_mut().zip(c.iter()) {
                *p -= *cv;
            }
        }
        centroids.extend_from_slice(&stage_centroids);
    }

    Codebook::new(matrix.item_type(), m, k, dim, centroids, config)
}

fn count_distinct(points: &[f32], dim: usize, cap: usize) -> usize {
    let mut seen: Vec<&[f32]> = Vec::new();
    for p in points.chunks_exact(dim) {
        if !seen.iter().any(|s| s == &p) {
            seen.push(p);
            if seen.len() >= cap {
                break;
            }
        }
    }
    seen.len()
}

fn lloyd(points: &[f32], dim: usize, k: usize, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = points.len() / dim;
    let mut centroids = plus_plus_init(points, dim, k, rng);
    let mut assignments = vec![0usize; n];
    let mut prev_inertia = f64::INFINITY;

    for _ in 0..config.max_iters {
        let mut inertia = 0.0f64;
        for (i, p) in points.chunks_exact(dim).enumerate() {
            let (j, d) = nearest_centroid(p, &centroids, dim);
            assignments[i] = j;
            inertia += d;
        }

        update_centroids(points, dim, k, &assignments, &mut centroids);
        repair_empty_clusters(points, dim, k, &mut assignments, &mut centroids);

        if prev_inertia.is_finite() {
            let improvement = (prev_inertia - inertia) / prev_inertia.max(f64::MIN_POSITIVE);
            if improvement >= 0.0 && improvement < config.tolerance {
                break;
            }
        }
        prev_inertia = inertia;
    }
    centroids
}

/// k-means++ seeding: first centroid uniform, then proportional to squared
/// distance from the nearest already-chosen centroid.
fn plus_plus_init(points: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    use rand::Rng;
    let n = points.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);

    let mut dists: Vec<f64> = points
        .chunks_exact(dim)
        .map(|p| squared_distance(p, &centroids[0..dim]))
        .collect();

    while centroids.len() / dim < k {
        let total: f64 = dists.iter().sum();
        let idx = if total <= 0.0 {
            // all remaining points coincide with chosen centroids
            rng.gen_range(0..n)
        } else {
            WeightedIndex::new(dists.iter().map(|d| d.max(0.0)))
                .map(|w| w.sample(rng))
                .unwrap_or_else(|_| rng.gen_range(0..n))
        };
        let chosen = &points[idx * dim..(idx + 1) * dim];
        centroids.extend_from_slice(chosen);
        for (d, p) in dists.iter_mut().zip(points.chunks_exact(dim)) {
            let nd = squared_distance(p, chosen);
            if nd < *d {
                *d = nd;
            }
        }
    }
    centroids
}

fn update_centroids(
    points: &[f32],
    dim: usize,
    k: usize,
    assignments: &[usize],
    centroids: &mut [f32],
) {
    let mut acc = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (i, p) in points.chunks_exact(dim).enumerate() {
        let j = assignments[i];
        counts[j] += 1;
        for (a, v) in acc[j * dim..(j + 1) * dim].iter_mut().zip(p.iter()) {
            *a += *v as f64;
        }
    }
    for j in 0..k {
        if counts[j] == 0 {
            continue; // handled by repair
        }
        let inv = 1.0 / counts[j] as f64;
        for d in 0..dim {
            centroids[j * dim + d] = (acc[j * dim + d] * inv) as f32;
        }
    }
}

/// Reseeds each empty centroid to the point currently farthest from its
/// assigned centroid, then reassigns that point.
fn repair_empty_clusters(
    points: &[f32],
    dim: usize,
    k: usize,
    assignments: &mut [usize],
    centroids: &mut [f32],
) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far_idx = 0usize;
        let mut far_dist = -1.0f64;
        for (i, p) in points.chunks_exact(dim).enumerate() {
            // only steal from clusters that can spare a point
            if counts[assignments[i]] <= 1 {
                continue;
            }
            let c = &centroids[assignments[i] * dim..(assignments[i] + 1) * dim];
            let d = squared_distance(p, c);
            if d > far_dist {
                far_dist = d;
                far_idx = i;
            }
        }
        let p = &points[far_idx * dim..(far_idx + 1) * dim];
        centroids[empty * dim..(empty + 1) * dim].copy_from_slice(p);
        assignments[far_idx] = empty;
    }
}
