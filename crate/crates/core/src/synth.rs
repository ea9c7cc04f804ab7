//! Seeded synthetic corpus: Gaussian topic clusters per item type, a catalog
//! with topic-worded metadata, and user interaction logs with within-cluster
//! affinity, so next-item structure is learnable by the reference scorer.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::catalog::CatalogRow;
use crate::embedding::EmbeddingMatrix;
use crate::sequence::{Annotations, LogEvent};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least one item type")]
    NoTypes,
    #[error("items_per_type {items} must be >= clusters {clusters}")]
    TooFewItems { items: usize, clusters: usize },
    #[error("clusters must be >= 1")]
    ZeroClusters,
    #[error("dim must be >= 1")]
    ZeroDim,
    #[error("affinity {affinity} must lie in [0, 1]")]
    BadAffinity { affinity: f64 },
    #[error("days must be >= 1")]
    ZeroDays,
    #[error(transparent)]
    Embedding(#[from] crate::embedding::EmbeddingError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub seed: u64,
    pub item_types: Vec<String>,
    pub items_per_type: usize,
    pub users: usize,
    pub events_per_user: usize,
    pub clusters: usize,
    pub affinity: f64,
    pub dim: usize,
    pub days: u32,
    /// Distance scale between cluster means; intra-cluster noise is unit.
    pub separation: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            item_types: vec!["episode".into(), "audiobook".into()],
            items_per_type: 5000,
            users: 2000,
            events_per_user: 50,
            clusters: 16,
            affinity: 0.8,
            dim: 48,
            days: 50,
            separation: 3.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub embeddings: Vec<EmbeddingMatrix>,
    pub catalog: Vec<CatalogRow>,
    pub logs: Vec<LogEvent>,
    pub annotations: Annotations,
    /// Generating cluster per item id, for structure-recovery oracles.
    pub cluster_of_item: BTreeMap<String, usize>,
}

const TOPIC_WORDS: [&str; 48] = [
    "history", "murder", "finance", "comedy", "science", "football", "cooking", "travel",
    "politics", "space", "wellness", "startups", "cinema", "poetry", "chess", "gardening",
    "economics", "mythology", "medicine", "jazz", "crime", "weather", "language", "robotics",
    "oceans", "mountains", "markets", "sleep", "parenting", "painting", "running", "fishing",
    "design", "privacy", "energy", "wine", "philosophy", "baseball", "astronomy", "knitting",
    "investing", "meditation", "architecture", "birds", "coffee", "trains", "volcanoes", "circus",
];

fn cluster_words(item_type_idx: usize, cluster: usize) -> [&'static str; 3] {
    let base = (item_type_idx * 31 + cluster * 7) % TOPIC_WORDS.len();
    [
        TOPIC_WORDS[base],
        TOPIC_WORDS[(base + 13) % TOPIC_WORDS.len()],
        TOPIC_WORDS[(base + 29) % TOPIC_WORDS.len()],
    ]
}

/// Generates the full corpus deterministically under the seed.
pub fn generate(params: &SynthParams) -> Result<SynthCorpus, SynthError> {
    if params.item_types.is_empty() {
        return Err(SynthError::NoTypes);
    }
    if params.clusters == 0 {
        return Err(SynthError::ZeroClusters);
    }
    if params.items_per_type < params.clusters {
        return Err(SynthError::TooFewItems {
            items: params.items_per_type,
            clusters: params.clusters,
        });
    }
    if params.dim == 0 {
        return Err(SynthError::ZeroDim);
    }
    if !(0.0..=1.0).contains(&params.affinity) {
        return Err(SynthError::BadAffinity {
            affinity: params.affinity,
        });
    }
    if params.days == 0 {
        return Err(SynthError::ZeroDays);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut embeddings = Vec::new();
    let mut catalog = Vec::new();
    let mut cluster_of_item = BTreeMap::new();
    // per type: per cluster: (item ids, sampling weights)
    let mut cluster_items: Vec<Vec<(Vec<String>, Vec<f64>)>> = Vec::new();

    for (type_idx, item_type) in params.item_types.iter().enumerate() {
        let mut means = vec![0.0f64; params.clusters * params.dim];
        for v in means.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v = g * params.separation;
        }
        let mut ids = Vec::with_capacity(params.items_per_type);
        let mut values = Vec::with_capacity(params.items_per_type * params.dim);
        let mut per_cluster: Vec<(Vec<String>, Vec<f64>)> =
            vec![(Vec::new(), Vec::new()); params.clusters];

        for i in 0..params.items_per_type {
            let cluster = if i < params.clusters {
                i // every cluster gets at least one item
            } else {
                rng.gen_range(0..params.clusters)
            };
            let item_id = format!("{item_type}-{i:05}");
            ids.push(item_id.clone());
            cluster_of_item.insert(item_id.clone(), cluster);
            for d in 0..params.dim {
                let noise: f64 = StandardNormal.sample(&mut rng);
                values.push((means[cluster * params.dim + d] + noise) as f32);
            }
            // within-cluster popularity decays with arrival rank
            let rank = per_cluster[cluster].0.len();
            let popularity = (params.items_per_type as f64 / (rank + 1) as f64 * 100.0).round()
                / 100.0;
            let words = cluster_words(type_idx, cluster);
            catalog.push(CatalogRow {
                item_id: item_id.clone(),
                item_type: item_type.clone(),
                popularity,
                created_at: rng.gen_range(0..params.days),
                title: format!("The {} {} hour {i}", words[0], words[1]),
                description: format!(
                    "A {} series about {} and {}. Episode notes inside.",
                    words[0], words[1], words[2]
                ),
            });
            per_cluster[cluster].0.push(item_id);
            per_cluster[cluster].1.push(1.0 / (rank + 1) as f64);
        }
        embeddings.push(EmbeddingMatrix::new(
            item_type.clone(),
            params.dim,
            ids,
            values,
        )?);
        cluster_items.push(per_cluster);
    }

    let mut logs = Vec::new();
    let mut annotations = Annotations::default();
    for u in 0..params.users {
        let user_id = format!("u{u:05}");
        let home = rng.gen_range(0..params.clusters);
        for e in 0..params.events_per_user {
            let type_idx = rng.gen_range(0..params.item_types.len());
            let cluster = if rng.gen::<f64>() < params.affinity {
                home
            } else {
                rng.gen_range(0..params.clusters)
            };
            let (ids, weights) = &cluster_items[type_idx][cluster];
            let idx = if ids.len() == 1 {
                0
            } else {
                WeightedIndex::new(weights).expect("positive weights").sample(&mut rng)
            };
            let day = (e as u64 * params.days as u64 / params.events_per_user.max(1) as u64)
                .min(params.days as u64 - 1) as u32;
            logs.push(LogEvent {
                user_id: user_id.clone(),
                item_id: ids[idx].clone(),
                day,
            });
        }
        let words = cluster_words(0, home);
        annotations.rationales.insert(
            user_id.clone(),
            format!("fits their steady interest in {}", words[0]),
        );
        annotations.profiles.insert(
            user_id,
            format!(
                "Listens mostly to {} and {} content, with occasional {}.",
                words[0], words[1], words[2]
            ),
        );
    }

    Ok(SynthCorpus {
        embeddings,
        catalog,
        logs,
        annotations,
        cluster_of_item,
    })
}
