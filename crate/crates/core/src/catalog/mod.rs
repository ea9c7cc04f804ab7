//! Catalog ownership: item entries, the unified vocabulary, and the SID
//! registry mapping tuples to canonical items.
//!
//! File formats. Catalog: UTF-8, line-delimited, tab-separated fields
//! `item_id  item_type  popularity  created_at  title  description`, with
//! tab/newline/backslash in title and description escaped as `\t`, `\n`,
//! `\\`. Registry: line-delimited
//! `item_type TAB c_1,...,c_M TAB canonical_id TAB collider_ids` with the
//! collider list comma-joined.

mod vocab;

pub use vocab::{vocab_extension_size, TypeBlock, Vocabulary, END_OF_TEXT};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::quantizer::SemanticId;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("duplicate item id {item_id}")]
    DuplicateItem { item_id: String },
    #[error("unknown item type {item_type}")]
    UnknownItemType { item_type: String },
    #[error("duplicate item type {item_type} in vocabulary")]
    DuplicateType { item_type: String },
    #[error("vocabulary ranges {a} and {b} overlap")]
    OverlappingBlocks { a: String, b: String },
    #[error("text token range must be non-empty")]
    EmptyTextRange,
    #[error("position {position} out of range for {item_type} (M={m})")]
    PositionOutOfRange {
        item_type: String,
        position: usize,
        m: usize,
    },
    #[error("code {code} out of range for {item_type} (K={k})")]
    CodeValueOutOfRange {
        item_type: String,
        code: u32,
        k: usize,
    },
    #[error("registry is empty")]
    EmptyRegistry,
}

/// A catalog row as stored on disk, before any SID is assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogRow {
    pub item_id: String,
    pub item_type: String,
    pub popularity: f64,
    pub created_at: u32,
    pub title: String,
    pub description: String,
}

/// A catalog item together with its assigned semantic id.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogEntry {
    pub item_id: String,
    pub item_type: String,
    pub sid: SemanticId,
    pub popularity: f64,
    pub title: String,
    pub description: String,
    pub created_at: u32,
}

impl CatalogEntry {
    pub fn from_row(row: CatalogRow, sid: SemanticId) -> Self {
        Self {
            item_id: row.item_id,
            item_type: row.item_type,
            sid,
            popularity: row.popularity,
            title: row.title,
            description: row.description,
            created_at: row.created_at,
        }
    }
}

pub(crate) fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            other => out.push(other),
        }
    }
    out
}

pub(crate) fn unescape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

/// Parses a catalog file, rejecting duplicate ids and malformed rows with
/// the offending line number.
pub fn load_catalog(path: &Path) -> Result<Vec<CatalogRow>, CatalogError> {
    let text = fs::read_to_string(path).map_err(|e| CatalogError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let p = path.display().to_string();
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(CatalogError::Parse {
                path: p.clone(),
                line: i + 1,
                reason: format!("expected 6 tab-separated fields, got {}", fields.len()),
            });
        }
        let popularity: f64 = fields[2].parse().map_err(|_| CatalogError::Parse {
            path: p.clone(),
            line: i + 1,
            reason: format!("bad popularity {:?}", fields[2]),
        })?;
        if !popularity.is_finite() || popularity < 0.0 {
            return Err(CatalogError::Parse {
                path: p.clone(),
                line: i + 1,
                reason: format!("popularity must be non-negative, got {popularity}"),
            });
        }
        let created_at: u32 = fields[3].parse().map_err(|_| CatalogError::Parse {
            path: p.clone(),
            line: i + 1,
            reason: format!("bad created_at {:?}", fields[3]),
        })?;
        if !seen.insert(fields[0].to_string()) {
            return Err(CatalogError::DuplicateItem {
                item_id: fields[0].to_string(),
            });
        }
        rows.push(CatalogRow {
            item_id: fields[0].to_string(),
            item_type: fields[1].to_string(),
            popularity,
            created_at,
            title: unescape_field(fields[4]),
            description: unescape_field(fields[5]),
        });
    }
    Ok(rows)
}

pub fn catalog_to_string(rows: &[CatalogRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.item_id,
            r.item_type,
            r.popularity,
            r.created_at,
            escape_field(&r.title),
            escape_field(&r.description),
        ));
    }
    out
}

pub fn store_catalog(path: &Path, rows: &[CatalogRow]) -> Result<(), CatalogError> {
    fs::write(path, catalog_to_string(rows)).map_err(|e| CatalogError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// One registered tuple: its canonical item and the full collider list
/// (sorted by item id; the canonical item always appears in the list).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub canonical: String,
    pub colliders: Vec<String>,
}

/// Per item type, the mapping from SID tuple to its canonical item.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SidRegistry {
    types: BTreeMap<String, BTreeMap<Vec<u32>, RegistryEntry>>,
}

/// How a tuple shared by several items picks its canonical item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollisionPolicy {
    /// Highest popularity wins; ties break to the lexicographically
    /// smallest item id.
    Popularity,
    /// Uniform choice from the collider list, deterministic under the seed.
    Random { seed: u64 },
}

impl SidRegistry {
    pub fn item_types(&self) -> impl Iterator<Item = &str> {
        self.types.keys().map(String::as_str)
    }

    pub fn tuples(&self, item_type: &str) -> Option<&BTreeMap<Vec<u32>, RegistryEntry>> {
        self.types.get(item_type)
    }

    pub fn resolve(&self, item_type: &str, codes: &[u32]) -> Option<&RegistryEntry> {
        self.types.get(item_type)?.get(codes)
    }

    pub fn tuple_count(&self) -> usize {
        self.types.values().map(BTreeMap::len).sum()
    }

    pub fn item_count(&self) -> usize {
        self.types
            .values()
            .flat_map(|m| m.values())
            .map(|e| e.colliders.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    /// Inverts the registry into an item -> (type, tuple) lookup. Every
    /// collider maps to the tuple it is registered under.
    pub fn item_tuple_index(&self) -> BTreeMap<String, (String, Vec<u32>)> {
        let mut index = BTreeMap::new();
        for (item_type, tuples) in &self.types {
            for (codes, entry) in tuples {
                for item in &entry.colliders {
                    index.insert(item.clone(), (item_type.clone(), codes.clone()));
                }
            }
        }
        index
    }
}

/// Groups entries by (type, tuple) and picks one canonical item per tuple
/// under the chosen policy.
pub fn resolve_collisions(entries: &[CatalogEntry], policy: CollisionPolicy) -> SidRegistry {
    let mut types: BTreeMap<String, BTreeMap<Vec<u32>, Vec<&CatalogEntry>>> = BTreeMap::new();
    for e in entries {
        types
            .entry(e.item_type.clone())
            .or_default()
            .entry(e.sid.codes().to_vec())
            .or_default()
            .push(e);
    }
    let mut rng = match policy {
        CollisionPolicy::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        CollisionPolicy::Popularity => None,
    };
    let mut registry = SidRegistry::default();
    for (item_type, tuples) in types {
        let mut out = BTreeMap::new();
        for (codes, mut group) in tuples {
            group.sort_by(|a, b| a.item_id.cmp(&b.item_id));
            let canonical = match policy {
                CollisionPolicy::Popularity => group
                    .iter()
                    .max_by(|a, b| {
                        a.popularity
                            .total_cmp(&b.popularity)
                            .then_with(|| b.item_id.cmp(&a.item_id))
                    })
                    .unwrap()
                    .item_id
                    .clone(),
                CollisionPolicy::Random { .. } => {
                    let idx = rng.as_mut().unwrap().gen_range(0..group.len());
                    group[idx].item_id.clone()
                }
            };
            out.insert(
                codes,
                RegistryEntry {
                    canonical,
                    colliders: group.iter().map(|e| e.item_id.clone()).collect(),
                },
            );
        }
        registry.types.insert(item_type, out);
    }
    registry
}

/// The atomic-id ablation: uniformly permutes the tuple-to-item assignment
/// within each item type, preserving the tuple multiset. Canonical items in
/// the permuted registry are the lexicographically smallest collider.
pub fn permute_sids(registry: &SidRegistry, seed: u64) -> Result<SidRegistry, CatalogError> {
    if registry.is_empty() {
        return Err(CatalogError::EmptyRegistry);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SidRegistry::default();
    for (item_type, tuples) in &registry.types {
        let mut slots: Vec<&Vec<u32>> = Vec::new();
        let mut items: Vec<&String> = Vec::new();
        for (codes, entry) in tuples {
            for item in &entry.colliders {
                slots.push(codes);
                items.push(item);
            }
        }
        items.shuffle(&mut rng);
        let mut regrouped: BTreeMap<Vec<u32>, Vec<String>> = BTreeMap::new();
        for (codes, item) in slots.into_iter().zip(items) {
            regrouped.entry(codes.clone()).or_default().push(item.clone());
        }
        let mut rebuilt = BTreeMap::new();
        for (codes, mut colliders) in regrouped {
            colliders.sort();
            rebuilt.insert(
                codes,
                RegistryEntry {
                    canonical: colliders[0].clone(),
                    colliders,
                },
            );
        }
        out.types.insert(item_type.clone(), rebuilt);
    }
    Ok(out)
}

pub fn registry_to_string(registry: &SidRegistry) -> String {
    let mut out = String::new();
    for (item_type, tuples) in &registry.types {
        for (codes, entry) in tuples {
            let tuple: Vec<String> = codes.iter().map(|c| c.to_string()).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                item_type,
                tuple.join(","),
                entry.canonical,
                entry.colliders.join(","),
            ));
        }
    }
    out
}

pub fn store_registry(path: &Path, registry: &SidRegistry) -> Result<(), CatalogError> {
    fs::write(path, registry_to_string(registry)).map_err(|e| CatalogError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_registry(path: &Path) -> Result<SidRegistry, CatalogError> {
    let text = fs::read_to_string(path).map_err(|e| CatalogError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let p = path.display().to_string();
    let mut registry = SidRegistry::default();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(CatalogError::Parse {
                path: p.clone(),
                line: i + 1,
                reason: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let codes: Result<Vec<u32>, _> = fields[1].split(',').map(str::parse).collect();
        let codes = codes.map_err(|_| CatalogError::Parse {
            path: p.clone(),
            line: i + 1,
            reason: format!("bad code tuple {:?}", fields[1]),
        })?;
        let colliders: Vec<String> = fields[3].split(',').map(str::to_string).collect();
        if !colliders.iter().any(|c| c == fields[2]) {
            return Err(CatalogError::Parse {
                path: p.clone(),
                line: i + 1,
                reason: format!("canonical {} missing from collider list", fields[2]),
            });
        }
        registry.types.entry(fields[0].to_string()).or_default().insert(
            codes,
            RegistryEntry {
                canonical: fields[2].to_string(),
                colliders,
            },
        );
    }
    Ok(registry)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, item_type: &str, codes: &[u32], popularity: f64) -> CatalogEntry {
        CatalogEntry {
            item_id: id.to_string(),
            item_type: item_type.to_string(),
            sid: SemanticId::new(codes.to_vec()),
            popularity,
            title: format!("title of {id}"),
            description: format!("description of {id}"),
            created_at: 0,
        }
    }

    #[test]
    fn popularity_policy_prefers_higher_popularity() {
        let entries = vec![
            entry("A", "ep", &[1, 2], 10.0),
            entry("B", "ep", &[1, 2], 50.0),
        ];
        let registry = resolve_collisions(&entries, CollisionPolicy::Popularity);
        let e = registry.resolve("ep", &[1, 2]).unwrap();
        assert_eq!(e.canonical, "B");
        assert_eq!(e.colliders, vec!["A".to_string(), "B".to_string()]);
    }

    #[test]
    fn single_item_is_its_own_canonical() {
        let entries = vec![entry("solo", "ep", &[0, 0], 1.0)];
        let registry = resolve_collisions(&entries, CollisionPolicy::Popularity);
        assert_eq!(registry.resolve("ep", &[0, 0]).unwrap().canonical, "solo");
    }

    #[test]
    fn popularity_ties_break_to_smallest_id() {
        let entries = vec![
            entry("a1", "ep", &[3], 7.0),
            entry("a0", "ep", &[3], 7.0),
        ];
        let registry = resolve_collisions(&entries, CollisionPolicy::Popularity);
        assert_eq!(registry.resolve("ep", &[3]).unwrap().canonical, "a0");
    }

    #[test]
    fn random_policy_is_seed_deterministic() {
        let entries: Vec<CatalogEntry> = (0..20)
            .map(|i| entry(&format!("i{i:02}"), "ep", &[(i % 3) as u32], i as f64))
            .collect();
        let a = resolve_collisions(&entries, CollisionPolicy::Random { seed: 5 });
        let b = resolve_collisions(&entries, CollisionPolicy::Random { seed: 5 });
        assert_eq!(a, b);
        let pop = resolve_collisions(&entries, CollisionPolicy::Popularity);
        // same tuples, same colliders either way
        assert_eq!(a.tuple_count(), pop.tuple_count());
        assert_eq!(a.item_count(), pop.item_count());
    }

    #[test]
    fn permute_preserves_tuple_multiset() {
        let entries: Vec<CatalogEntry> = (0..30)
            .map(|i| entry(&format!("i{i:02}"), "ep", &[(i % 7) as u32, (i % 3) as u32], i as f64))
            .collect();
        let registry = resolve_collisions(&entries, CollisionPolicy::Popularity);
        let permuted = permute_sids(&registry, 99).unwrap();

        // sort-and-compare oracle over (tuple, multiplicity)
        let collect = |r: &SidRegistry| {
            let mut v: Vec<(Vec<u32>, usize)> = r
                .tuples("ep")
                .unwrap()
                .iter()
                .map(|(codes, e)| (codes.clone(), e.colliders.len()))
                .collect();
            v.sort();
            v
        };
        assert_eq!(collect(&registry), collect(&permuted));

        // same item universe
        let items = |r: &SidRegistry| {
            let mut v: Vec<String> = r.item_tuple_index().into_keys().collect();
            v.sort();
            v
        };
        assert_eq!(items(&registry), items(&permuted));

        // deterministic under seed
        assert_eq!(permuted, permute_sids(&registry, 99).unwrap());
    }

    #[test]
    fn permute_single_item_is_identity() {
        let entries = vec![entry("only", "ep", &[4, 2], 1.0)];
        let registry = resolve_collisions(&entries, CollisionPolicy::Popularity);
        let permuted = permute_sids(&registry, 1).unwrap();
        assert_eq!(registry, permuted);
    }

    #[test]
    fn catalog_file_round_trip_with_escapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.tsv");
        let rows = vec![
            CatalogRow {
                item_id: "e1".into(),
                item_type: "ep".into(),
                popularity: 3.5,
                created_at: 12,
                title: "tabs\tand\nnewlines".into(),
                description: "back\\slash".into(),
            },
            CatalogRow {
                item_id: "e2".into(),
                item_type: "book".into(),
                popularity: 0.0,
                created_at: 0,
                title: "plain".into(),
                description: String::new(),
            },
        ];
        store_catalog(&path, &rows).unwrap();
        let back = load_catalog(&path).unwrap();
        assert_eq!(rows, back);
    }

    #[test]
    fn catalog_parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.tsv");
        fs::write(&path, "a\tep\t1\t0\tt\td\nb\tep\tnot-a-number\t0\tt\td\n").unwrap();
        match load_catalog(&path) {
            Err(CatalogError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn registry_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.tsv");
        let entries = vec![
            entry("A", "ep", &[1, 2], 10.0),
            entry("B", "ep", &[1, 2], 50.0),
            entry("C", "book", &[0, 1], 5.0),
        ];
        let registry = resolve_collisions(&entries, CollisionPolicy::Popularity);
        store_registry(&path, &registry).unwrap();
        let back = load_registry(&path).unwrap();
        assert_eq!(registry, back);
    }
}
