//! Ranking metrics, neighborhood stability, and SID validity rates.
//!
//! Metrics report format: line-delimited `metric TAB K TAB value TAB n`.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::catalog::{SidRegistry, Vocabulary};
use crate::embedding::EmbeddingMatrix;
use crate::sequence::spans_resolve;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty record set")]
    EmptyRecords,
    #[error("K must be >= 1")]
    ZeroK,
    #[error("need more items than neighbors: n={n}, count={count}")]
    TooFewItems { n: usize, count: usize },
    #[error("snapshots cover different item universes or neighbor counts")]
    UniverseMismatch,
    #[error("ranked list for user {user_id} contains duplicate item {item_id}")]
    DuplicateRanked { user_id: String, item_id: String },
}

/// One evaluated user: the ranked candidates and the held-out label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalRecord {
    pub user_id: String,
    pub ranked: Vec<String>,
    pub label: String,
}

impl EvalRecord {
    pub fn new(
        user_id: impl Into<String>,
        ranked: Vec<String>,
        label: impl Into<String>,
    ) -> Result<Self, EvalError> {
        let user_id = user_id.into();
        let mut seen = BTreeSet::new();
        for item in &ranked {
            if !seen.insert(item.as_str()) {
                return Err(EvalError::DuplicateRanked {
                    user_id,
                    item_id: item.clone(),
                });
            }
        }
        Ok(Self {
            user_id,
            ranked,
            label: label.into(),
        })
    }

    /// 1-based rank of the label, if present.
    fn label_rank(&self) -> Option<usize> {
        self.ranked.iter().position(|i| i == &self.label).map(|p| p + 1)
    }
}

/// Fraction of users whose label appears in the top K.
pub fn hit_rate_at_k(records: &[EvalRecord], k: usize) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let hits = records
        .iter()
        .filter(|r| r.label_rank().is_some_and(|rank| rank <= k))
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// Mean over users of log(2)/log(r+1) when the label ranks within K,
/// otherwise 0.
pub fn ndcg_at_k(records: &[EvalRecord], k: usize) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let sum: f64 = records
        .iter()
        .map(|r| match r.label_rank() {
            Some(rank) if rank <= k => 2f64.ln() / ((rank + 1) as f64).ln(),
            _ => 0.0,
        })
        .sum();
    Ok(sum / records.len() as f64)
}

/// Top-n cosine neighborhoods for every item at one embedding epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodSnapshot {
    pub epoch: String,
    pub n: usize,
    pub neighbors: BTreeMap<String, BTreeSet<String>>,
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

/// Exact brute-force top-n neighborhoods under cosine similarity, self
/// excluded, ties broken by item id.
pub fn knn_topn(
    matrix: &EmbeddingMatrix,
    n: usize,
    epoch: impl Into<String>,
) -> Result<NeighborhoodSnapshot, EvalError> {
    if n == 0 || matrix.count() <= n {
        return Err(EvalError::TooFewItems {
            n,
            count: matrix.count(),
        });
    }
    let ids = matrix.item_ids();
    let mut neighbors = BTreeMap::new();
    for i in 0..matrix.count() {
        let mut scored: Vec<(f64, &str)> = (0..matrix.count())
            .filter(|&j| j != i)
            .map(|j| (cosine(matrix.row(i), matrix.row(j)), ids[j].as_str()))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let top: BTreeSet<String> = scored[..n].iter().map(|(_, id)| id.to_string()).collect();
        neighbors.insert(ids[i].clone(), top);
    }
    Ok(NeighborhoodSnapshot {
        epoch: epoch.into(),
        n,
        neighbors,
    })
}

/// Per-item Jaccard overlaps between two snapshots plus the median and
/// 10th percentile (nearest-rank) summary.
#[derive(Debug, Clone, PartialEq)]
pub struct JaccardSummary {
    pub per_item: BTreeMap<String, f64>,
    pub median: f64,
    pub p10: f64,
    pub n_items: usize,
}

pub fn jaccard_stability(
    s0: &NeighborhoodSnapshot,
    s1: &NeighborhoodSnapshot,
) -> Result<JaccardSummary, EvalError> {
    if s0.n != s1.n
        || s0.neighbors.len() != s1.neighbors.len()
        || !s0.neighbors.keys().eq(s1.neighbors.keys())
    {
        return Err(EvalError::UniverseMismatch);
    }
    if s0.neighbors.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let mut per_item = BTreeMap::new();
    for (item, a) in &s0.neighbors {
        let b = &s1.neighbors[item];
        let inter = a.intersection(b).count() as f64;
        let union = a.union(b).count() as f64;
        per_item.insert(item.clone(), if union == 0.0 { 1.0 } else { inter / union });
    }
    let mut values: Vec<f64> = per_item.values().copied().collect();
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let median = if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    };
    // nearest-rank percentile: ceil(p * n), 1-based
    let rank = ((0.10 * n as f64).ceil() as usize).max(1);
    let p10 = values[rank - 1];
    Ok(JaccardSummary {
        per_item,
        median,
        p10,
        n_items: n,
    })
}

/// Fraction of outputs whose every span parses and resolves to a registered
/// tuple. A malformed span makes the whole output invalid.
pub fn valid_sid_rate(
    outputs: &[Vec<usize>],
    registry: &SidRegistry,
    vocabulary: &Vocabulary,
) -> Result<f64, EvalError> {
    if outputs.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let valid = outputs
        .iter()
        .filter(|ids| spans_resolve(ids, registry, vocabulary))
        .count();
    Ok(valid as f64 / outputs.len() as f64)
}

/// One metrics report line: `metric TAB K TAB value TAB n`.
pub fn report_line(metric: &str, k: usize, value: f64, n: usize) -> String {
    format!("{metric}\t{k}\t{value:.6}\t{n}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(user: &str, ranked: &[&str], label: &str) -> EvalRecord {
        EvalRecord::new(
            user,
            ranked.iter().map(|s| s.to_string()).collect(),
            label,
        )
        .unwrap()
    }

    fn ranked_to(n: usize) -> Vec<&'static str> {
        const POOL: [&str; 15] = [
            "r01", "r02", "r03", "r04", "r05", "r06", "r07", "r08", "r09", "r10", "r11", "r12",
            "r13", "r14", "r15",
        ];
        POOL[..n].to_vec()
    }

    #[test]
    fn hit_rate_cases() {
        let all_first = vec![
            record("u1", &["a", "b"], "a"),
            record("u2", &["c", "d"], "c"),
        ];
        assert_eq!(hit_rate_at_k(&all_first, 1).unwrap(), 1.0);

        // ranks {1, 12, 5} at K=10 -> 2/3
        let mut r12 = ranked_to(15);
        r12[11] = "label";
        let records = vec![
            record("u1", &["label", "x"], "label"),
            record("u2", &r12, "label"),
            EvalRecord::new(
                "u3",
                ranked_to(10)
                    .iter()
                    .enumerate()
                    .map(|(i, s)| if i == 4 { "label".to_string() } else { s.to_string() })
                    .collect(),
                "label",
            )
            .unwrap(),
        ];
        assert!((hit_rate_at_k(&records, 10).unwrap() - 2.0 / 3.0).abs() < 1e-12);

        // absent label contributes 0
        let absent = vec![record("u1", &["a", "b"], "missing")];
        assert_eq!(hit_rate_at_k(&absent, 10).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&absent, 10).unwrap(), 0.0);
    }

    #[test]
    fn ndcg_closed_forms() {
        let rank1 = vec![record("u", &["a"], "a")];
        assert!((ndcg_at_k(&rank1, 5).unwrap() - 1.0).abs() < 1e-12);

        let rank3 = vec![record("u", &["x", "y", "a"], "a")];
        assert!((ndcg_at_k(&rank3, 5).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ndcg_matches_direct_formula_oracle() {
        // 10 users with assorted ranks, including misses
        let ranks = [1usize, 2, 3, 4, 5, 7, 10, 11, 0, 0]; // 0 = absent
        let records: Vec<EvalRecord> = ranks
            .iter()
            .enumerate()
            .map(|(u, &rank)| {
                let mut ranked: Vec<String> =
                    (0..12).map(|i| format!("cand{u}_{i}")).collect();
                if rank > 0 {
                    ranked[rank - 1] = "label".to_string();
                }
                EvalRecord::new(format!("u{u}"), ranked, "label").unwrap()
            })
            .collect();

        for k in [1usize, 3, 10] {
            let got = ndcg_at_k(&records, k).unwrap();
            // independent summation
            let mut sum = 0.0;
            for &rank in &ranks {
                if rank >= 1 && rank <= k {
                    sum += (2.0f64).ln() / ((rank as f64) + 1.0).ln();
                }
            }
            let expect = sum / ranks.len() as f64;
            assert!((got - expect).abs() < 1e-9, "K={k}: {got} vs {expect}");

            let hr = hit_rate_at_k(&records, k).unwrap();
            let expect_hr =
                ranks.iter().filter(|&&r| r >= 1 && r <= k).count() as f64 / ranks.len() as f64;
            assert!((hr - expect_hr).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_monotone_in_k() {
        let ranks = [1usize, 3, 6, 9, 0];
        let records: Vec<EvalRecord> = ranks
            .iter()
            .enumerate()
            .map(|(u, &rank)| {
                let mut ranked: Vec<String> = (0..10).map(|i| format!("c{u}_{i}")).collect();
                if rank > 0 {
                    ranked[rank - 1] = "label".into();
                }
                EvalRecord::new(format!("u{u}"), ranked, "label").unwrap()
            })
            .collect();
        let mut prev_hr = 0.0;
        let mut prev_ndcg = 0.0;
        for k in 1..=10 {
            let hr = hit_rate_at_k(&records, k).unwrap();
            let ndcg = ndcg_at_k(&records, k).unwrap();
            assert!(hr + 1e-12 >= prev_hr);
            assert!(ndcg + 1e-12 >= prev_ndcg);
            assert!(ndcg <= hr + 1e-12, "per-user NDCG contribution <= HR");
            prev_hr = hr;
            prev_ndcg = ndcg;
        }
    }

    #[test]
    fn duplicate_ranked_items_rejected() {
        assert!(matches!(
            EvalRecord::new("u", vec!["a".into(), "a".into()], "a"),
            Err(EvalError::DuplicateRanked { .. })
        ));
    }

    #[test]
    fn knn_collinear_ties_break_by_id() {
        // identical points: cosine exactly 1 between all pairs, tie by id
        let m = EmbeddingMatrix::new(
            "t",
            2,
            vec!["b".into(), "a".into(), "c".into()],
            vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        let snap = knn_topn(&m, 1, "e0").unwrap();
        assert_eq!(snap.neighbors["b"], BTreeSet::from(["a".to_string()]));
        assert_eq!(snap.neighbors["a"], BTreeSet::from(["b".to_string()]));
        assert_eq!(snap.neighbors["c"], BTreeSet::from(["a".to_string()]));
    }

    #[test]
    fn knn_duplicate_is_top_neighbor() {
        let m = EmbeddingMatrix::new(
            "t",
            2,
            vec!["i".into(), "dup".into(), "far".into()],
            vec![1.0, 0.0, 1.0, 0.0, -1.0, 0.5],
        )
        .unwrap();
        let snap = knn_topn(&m, 1, "e0").unwrap();
        assert!(snap.neighbors["i"].contains("dup"));
    }

    #[test]
    fn knn_matches_all_pairs_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let n = 50;
        let dim = 5;
        let ids: Vec<String> = (0..n).map(|i| format!("i{i:02}")).collect();
        let values: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = EmbeddingMatrix::new("t", dim, ids.clone(), values).unwrap();
        let snap = knn_topn(&m, 5, "e0").unwrap();

        for i in 0..n {
            // full pairwise oracle
            let mut sims: Vec<(f64, String)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (cosine(m.row(i), m.row(j)), ids[j].clone()))
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
            let expect: BTreeSet<String> = sims[..5].iter().map(|(_, id)| id.clone()).collect();
            assert_eq!(snap.neighbors[&ids[i]], expect);
        }
    }

    #[test]
    fn jaccard_identical_disjoint_and_paper_fixture() {
        let make = |shared: usize, total: usize, tag: &str| {
            let mut neighbors = BTreeMap::new();
            let set: BTreeSet<String> = (0..shared)
                .map(|i| format!("s{i}"))
                .chain((shared..total).map(|i| format!("{tag}{i}")))
                .collect();
            neighbors.insert("item".to_string(), set);
            NeighborhoodSnapshot {
                epoch: tag.to_string(),
                n: total,
                neighbors,
            }
        };

        let a = make(50, 50, "x");
        let b = make(50, 50, "x");
        let summary = jaccard_stability(&a, &b).unwrap();
        assert_eq!(summary.median, 1.0);

        // 50-member sets sharing exactly 37 -> 37/63
        let a = make(37, 50, "a");
        let b = make(37, 50, "b");
        let summary = jaccard_stability(&a, &b).unwrap();
        assert!((summary.median - 37.0 / 63.0).abs() < 1e-12);
        assert!((summary.median - 0.587).abs() < 1e-3);

        let a = make(0, 10, "a");
        let b = make(0, 10, "b");
        assert_eq!(jaccard_stability(&a, &b).unwrap().median, 0.0);
    }

    #[test]
    fn jaccard_is_symmetric_and_rejects_mismatch() {
        let snap = |ids: &[(&str, &[&str])], n: usize| NeighborhoodSnapshot {
            epoch: "e".into(),
            n,
            neighbors: ids
                .iter()
                .map(|(k, v)| {
                    (
                        k.to_string(),
                        v.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(),
                    )
                })
                .collect(),
        };
        let a = snap(&[("i", &["x", "y"]), ("j", &["x", "z"])], 2);
        let b = snap(&[("i", &["x", "z"]), ("j", &["x", "z"])], 2);
        let ab = jaccard_stability(&a, &b).unwrap();
        let ba = jaccard_stability(&b, &a).unwrap();
        assert_eq!(ab, ba);

        let c = snap(&[("i", &["x", "y"])], 2);
        assert!(matches!(
            jaccard_stability(&a, &c),
            Err(EvalError::UniverseMismatch)
        ));
    }
}
