//! Catalog-valid constrained generation: per-type prefix tries over the
//! registered SID tuples, the span-aware masking automaton, constrained beam
//! search, and top-p sampling.

mod beam;
mod sample;

pub use beam::{constrained_beam_search, GenerationResult, RankedItem};
pub use sample::{sample_top_p, unconstrained_generate, GenMode};

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::catalog::{SidRegistry, Vocabulary};
use crate::sequence::SequenceError;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("registry has no tuples for item type {item_type}")]
    EmptyType { item_type: String },
    #[error("unknown item type {item_type}")]
    UnknownItemType { item_type: String },
    #[error("tuple {tuple:?} has length {got}, expected {expected}")]
    InconsistentTuple {
        tuple: Vec<u32>,
        got: usize,
        expected: usize,
    },
    #[error("no valid items: the allowed set is empty")]
    NoValidItems,
    #[error("beam width must be >= 1")]
    ZeroWidth,
    #[error("temperature must be > 0, got {temperature}")]
    BadTemperature { temperature: f64 },
    #[error("top_p must lie in (0, 1], got {top_p}")]
    BadTopP { top_p: f64 },
    #[error("top_k must be >= 1")]
    ZeroTopK,
    #[error("scorer returned {got} scores for a vocabulary of {expected}")]
    ScorerSizeMismatch { got: usize, expected: usize },
    #[error("token {token} is not allowed in the current decode state")]
    TokenNotAllowed { token: usize },
    #[error("malformed prompt: {0}")]
    InvalidPrompt(#[from] SequenceError),
    #[error(transparent)]
    Vocab(#[from] crate::catalog::CatalogError),
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<u32, usize>,
    item: Option<String>,
}

/// Prefix trie over every registered tuple of one item type. Each
/// root-to-leaf path has length exactly M; leaves carry the canonical item.
#[derive(Debug, Clone)]
pub struct SidTrie {
    item_type: String,
    m: usize,
    nodes: Vec<TrieNode>,
}

impl SidTrie {
    pub fn item_type(&self) -> &str {
        &self.item_type
    }

    pub fn tuple_len(&self) -> usize {
        self.m
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.item.is_some()).count()
    }

    pub const ROOT: usize = 0;

    /// Child codes available at a node, in ascending code order.
    pub fn children(&self, node: usize) -> impl Iterator<Item = (u32, usize)> + '_ {
        self.nodes[node].children.iter().map(|(&c, &n)| (c, n))
    }

    pub fn child(&self, node: usize, code: u32) -> Option<usize> {
        self.nodes[node].children.get(&code).copied()
    }

    /// Canonical item id at a leaf node.
    pub fn item_at(&self, node: usize) -> Option<&str> {
        self.nodes[node].item.as_deref()
    }

    /// Walks a full tuple to its canonical item.
    pub fn resolve(&self, codes: &[u32]) -> Option<&str> {
        let mut node = Self::ROOT;
        for &code in codes {
            node = self.child(node, code)?;
        }
        self.item_at(node)
    }

    /// Every (tuple, canonical item) pair, in lexicographic tuple order.
    pub fn tuples(&self) -> Vec<(Vec<u32>, String)> {
        let mut out = Vec::new();
        let mut stack = vec![(Self::ROOT, Vec::new())];
        while let Some((node, path)) = stack.pop() {
            if let Some(item) = &self.nodes[node].item {
                out.push((path.clone(), item.clone()));
            }
            // reverse so the stack pops in ascending code order
            for (code, child) in self.nodes[node].children.iter().rev() {
                let mut next = path.clone();
                next.push(*code);
                stack.push((*child, next));
            }
        }
        out.sort();
        out
    }

    fn insert(&mut self, codes: &[u32], item: &str) {
        let mut node = Self::ROOT;
        for &code in codes {
            node = match self.nodes[node].children.get(&code) {
                Some(&n) => n,
                None => {
                    self.nodes.push(TrieNode::default());
                    let n = self.nodes.len() - 1;
                    self.nodes[node].children.insert(code, n);
                    n
                }
            };
        }
        self.nodes[node].item = Some(item.to_string());
    }

    /// A copy of the trie keeping only tuples whose canonical item is in the
    /// subset.
    pub fn restrict_to(&self, items: &BTreeSet<String>) -> Result<SidTrie, DecodeError> {
        let mut out = SidTrie {
            item_type: self.item_type.clone(),
            m: self.m,
            nodes: vec![TrieNode::default()],
        };
        let mut kept = 0usize;
        for (codes, item) in self.tuples() {
            if items.contains(&item) {
                out.insert(&codes, &item);
                kept += 1;
            }
        }
        if kept == 0 {
            return Err(DecodeError::NoValidItems);
        }
        Ok(out)
    }
}

/// Builds the prefix trie for one item type from the registry.
pub fn build_trie(registry: &SidRegistry, item_type: &str) -> Result<SidTrie, DecodeError> {
    let tuples = registry
        .tuples(item_type)
        .filter(|t| !t.is_empty())
        .ok_or_else(|| DecodeError::EmptyType {
            item_type: item_type.to_string(),
        })?;
    let m = tuples.keys().next().expect("non-empty").len();
    let mut trie = SidTrie {
        item_type: item_type.to_string(),
        m,
        nodes: vec![TrieNode::default()],
    };
    for (codes, entry) in tuples {
        if codes.len() != m {
            return Err(DecodeError::InconsistentTuple {
                tuple: codes.clone(),
                got: codes.len(),
                expected: m,
            });
        }
        trie.insert(codes, &entry.canonical);
    }
    Ok(trie)
}

/// Builds tries for every item type in the registry.
pub fn build_tries(registry: &SidRegistry) -> Result<BTreeMap<String, SidTrie>, DecodeError> {
    registry
        .item_types()
        .map(|t| build_trie(registry, t).map(|trie| (t.to_string(), trie)))
        .collect()
}

/// Where the decoding automaton stands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mode {
    /// Free text; `[SID]` may open a span.
    Outside,
    /// Inside a span: the trie node reached so far and the number of codes
    /// consumed. The item type is pinned by the first code token.
    Inside {
        choice: Option<(String, usize)>,
        position: usize,
    },
}

/// Span-aware decode state: the automaton mode plus every token emitted so
/// far.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeState {
    pub mode: Mode,
    pub emitted: Vec<usize>,
}

impl Default for DecodeState {
    fn default() -> Self {
        Self::new()
    }
}

impl DecodeState {
    pub fn new() -> Self {
        Self {
            mode: Mode::Outside,
            emitted: Vec::new(),
        }
    }

    /// Applies one token, trusting that it came from [`allowed_tokens`].
    pub fn advance(
        &mut self,
        token: usize,
        tries: &BTreeMap<String, SidTrie>,
        vocabulary: &Vocabulary,
    ) -> Result<(), DecodeError> {
        match &mut self.mode {
            Mode::Outside => {
                if token == vocabulary.sid_open() {
                    self.mode = Mode::Inside {
                        choice: None,
                        position: 0,
                    };
                } else if !vocabulary.is_text(token) {
                    return Err(DecodeError::TokenNotAllowed { token });
                }
            }
            Mode::Inside { choice, position } => {
                if token == vocabulary.sid_close() {
                    let done = matches!(choice, Some((t, _)) if tries
                        .get(t.as_str())
                        .is_some_and(|trie| *position == trie.tuple_len()));
                    if !done {
                        return Err(DecodeError::TokenNotAllowed { token });
                    }
                    self.mode = Mode::Outside;
                } else if let Some((token_type, _, code)) = vocabulary.token_triple(token) {
                    let (item_type, node) = match choice {
                        Some((t, n)) => (t.clone(), *n),
                        None => (token_type.to_string(), SidTrie::ROOT),
                    };
                    if item_type != token_type {
                        return Err(DecodeError::TokenNotAllowed { token });
                    }
                    let trie = tries
                        .get(&item_type)
                        .ok_or_else(|| DecodeError::UnknownItemType {
                            item_type: item_type.clone(),
                        })?;
                    let next = trie
                        .child(node, code)
                        .ok_or(DecodeError::TokenNotAllowed { token })?;
                    *choice = Some((item_type, next));
                    *position += 1;
                } else {
                    return Err(DecodeError::TokenNotAllowed { token });
                }
            }
        }
        self.emitted.push(token);
        Ok(())
    }
}

/// The token ids the automaton allows next, ascending.
///
/// Outside a span: every text token plus `[SID]`. On a fresh span the
/// continuations come from the target type's trie root when a target is
/// set, otherwise from every trie root. Inside a span at position m < M:
/// the children of the current node. At m = M: only `[/SID]`.
pub fn allowed_tokens(
    state: &DecodeState,
    tries: &BTreeMap<String, SidTrie>,
    vocabulary: &Vocabulary,
    target_type: Option<&str>,
) -> Result<Vec<usize>, DecodeError> {
    match &state.mode {
        Mode::Outside => {
            let mut out: Vec<usize> = (0..vocabulary.text_token_count()).collect();
            out.push(vocabulary.sid_open());
            Ok(out)
        }
        Mode::Inside {
            choice: None,
            position: 0,
        } => {
            let mut out = Vec::new();
            match target_type {
                Some(t) => {
                    let trie = tries.get(t).ok_or_else(|| DecodeError::UnknownItemType {
                        item_type: t.to_string(),
                    })?;
                    for (code, _) in trie.children(SidTrie::ROOT) {
                        out.push(vocabulary.sid_token_id(t, 1, code)?);
                    }
                }
                None => {
                    for (t, trie) in tries {
                        for (code, _) in trie.children(SidTrie::ROOT) {
                            out.push(vocabulary.sid_token_id(t, 1, code)?);
                        }
                    }
                }
            }
            out.sort_unstable();
            Ok(out)
        }
        Mode::Inside {
            choice: Some((item_type, node)),
            position,
        } => {
            let trie = tries
                .get(item_type)
                .ok_or_else(|| DecodeError::UnknownItemType {
                    item_type: item_type.clone(),
                })?;
            if *position == trie.tuple_len() {
                return Ok(vec![vocabulary.sid_close()]);
            }
            let mut out = Vec::new();
            for (code, _) in trie.children(*node) {
                out.push(vocabulary.sid_token_id(item_type, position + 1, code)?);
            }
            out.sort_unstable();
            Ok(out)
        }
        Mode::Inside { choice: None, .. } => unreachable!("type pinned after first code"),
    }
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values
        .clone()
        .fold(f64::NEG_INFINITY, |a, b| if b > a { b } else { a });
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

pub(crate) fn checked_scores<S: crate::scorer::Scorer>(
    scorer: &S,
    context: &[usize],
    vocabulary: &Vocabulary,
) -> Result<Vec<f64>, DecodeError> {
    let scores = scorer.next_scores(context);
    if scores.len() != vocabulary.total_size() {
        return Err(DecodeError::ScorerSizeMismatch {
            got: scores.len(),
            expected: vocabulary.total_size(),
        });
    }
    Ok(scores)
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::catalog::{resolve_collisions, CatalogEntry, CollisionPolicy, SidRegistry};
    use crate::quantizer::SemanticId;

    pub fn registry_of(tuples: &[(&str, &[u32], &str)]) -> SidRegistry {
        let entries: Vec<CatalogEntry> = tuples
            .iter()
            .map(|(item_type, codes, id)| CatalogEntry {
                item_id: id.to_string(),
                item_type: item_type.to_string(),
                sid: SemanticId::new(codes.to_vec()),
                popularity: 1.0,
                title: format!("t {id}"),
                description: String::new(),
                created_at: 0,
            })
            .collect();
        resolve_collisions(&entries, CollisionPolicy::Popularity)
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::registry_of;
    use super::*;
    use crate::embedding::ItemTypeSpace;

    fn vocab() -> Vocabulary {
        Vocabulary::build(
            8,
            &[
                ItemTypeSpace::new("ep", 4, 4, 2, 4).unwrap(),
                ItemTypeSpace::new("book", 4, 4, 2, 4).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn trie_structure_matches_tuples() {
        let registry = registry_of(&[
            ("ep", &[1, 2], "a"),
            ("ep", &[1, 3], "b"),
            ("ep", &[2, 2], "c"),
        ]);
        let trie = build_trie(&registry, "ep").unwrap();
        let root_codes: Vec<u32> = trie.children(SidTrie::ROOT).map(|(c, _)| c).collect();
        assert_eq!(root_codes, vec![1, 2]);
        let node1 = trie.child(SidTrie::ROOT, 1).unwrap();
        let codes: Vec<u32> = trie.children(node1).map(|(c, _)| c).collect();
        assert_eq!(codes, vec![2, 3]);
        assert_eq!(trie.leaf_count(), 3);
        assert_eq!(trie.resolve(&[1, 3]), Some("b"));
        assert_eq!(trie.resolve(&[3, 3]), None);
    }

    #[test]
    fn single_tuple_gives_single_path() {
        let registry = registry_of(&[("ep", &[0, 1], "only")]);
        let trie = build_trie(&registry, "ep").unwrap();
        assert_eq!(trie.node_count(), 3); // root + 2 path nodes
        assert_eq!(trie.leaf_count(), 1);
        assert_eq!(trie.tuple_len(), 2);
    }

    #[test]
    fn leaf_set_equals_registry_tuples() {
        let registry = registry_of(&[
            ("ep", &[1, 2], "a"),
            ("ep", &[1, 3], "b"),
            ("ep", &[2, 2], "c"),
            ("ep", &[2, 2], "d"), // collides with c
        ]);
        let trie = build_trie(&registry, "ep").unwrap();
        let trie_tuples: Vec<Vec<u32>> = trie.tuples().into_iter().map(|(c, _)| c).collect();
        let registry_tuples: Vec<Vec<u32>> =
            registry.tuples("ep").unwrap().keys().cloned().collect();
        assert_eq!(trie_tuples, registry_tuples);
        assert_eq!(trie.leaf_count(), registry.tuples("ep").unwrap().len());
    }

    #[test]
    fn missing_type_errors() {
        let registry = registry_of(&[("ep", &[1, 2], "a")]);
        assert!(matches!(
            build_trie(&registry, "ghost"),
            Err(DecodeError::EmptyType { .. })
        ));
    }

    #[test]
    fn allowed_tokens_walks_the_automaton() {
        let v = vocab();
        let registry = registry_of(&[
            ("ep", &[1, 2], "a"),
            ("ep", &[1, 3], "b"),
            ("ep", &[2, 2], "c"),
        ]);
        let tries = build_tries(&registry).unwrap();

        let mut state = DecodeState::new();
        let outside = allowed_tokens(&state, &tries, &v, None).unwrap();
        assert_eq!(outside.len(), v.text_token_count() + 1);
        assert!(outside.contains(&v.sid_open()));

        state.advance(v.sid_open(), &tries, &v).unwrap();
        let roots = allowed_tokens(&state, &tries, &v, None).unwrap();
        assert_eq!(
            roots,
            vec![
                v.sid_token_id("ep", 1, 1).unwrap(),
                v.sid_token_id("ep", 1, 2).unwrap()
            ]
        );

        state
            .advance(v.sid_token_id("ep", 1, 1).unwrap(), &tries, &v)
            .unwrap();
        let next = allowed_tokens(&state, &tries, &v, None).unwrap();
        assert_eq!(
            next,
            vec![
                v.sid_token_id("ep", 2, 2).unwrap(),
                v.sid_token_id("ep", 2, 3).unwrap()
            ]
        );

        state
            .advance(v.sid_token_id("ep", 2, 3).unwrap(), &tries, &v)
            .unwrap();
        let closing = allowed_tokens(&state, &tries, &v, None).unwrap();
        assert_eq!(closing, vec![v.sid_close()]);

        state.advance(v.sid_close(), &tries, &v).unwrap();
        assert_eq!(state.mode, Mode::Outside);
        assert_eq!(state.emitted.len(), 4);
    }

    #[test]
    fn target_type_restricts_span_opening() {
        let v = vocab();
        let registry = registry_of(&[("ep", &[1, 2], "a"), ("book", &[0, 0], "x")]);
        let tries = build_tries(&registry).unwrap();
        let mut state = DecodeState::new();
        state.advance(v.sid_open(), &tries, &v).unwrap();

        let all = allowed_tokens(&state, &tries, &v, None).unwrap();
        assert_eq!(all.len(), 2);

        let only_book = allowed_tokens(&state, &tries, &v, Some("book")).unwrap();
        assert_eq!(only_book, vec![v.sid_token_id("book", 1, 0).unwrap()]);

        assert!(matches!(
            allowed_tokens(&state, &tries, &v, Some("ghost")),
            Err(DecodeError::UnknownItemType { .. })
        ));
    }

    #[test]
    fn allowed_inside_span_stays_in_type_block() {
        let v = vocab();
        let registry = registry_of(&[
            ("ep", &[1, 2], "a"),
            ("ep", &[3, 0], "b"),
            ("book", &[0, 0], "x"),
        ]);
        let tries = build_tries(&registry).unwrap();
        let mut state = DecodeState::new();
        state.advance(v.sid_open(), &tries, &v).unwrap();
        state
            .advance(v.sid_token_id("ep", 1, 1).unwrap(), &tries, &v)
            .unwrap();
        let allowed = allowed_tokens(&state, &tries, &v, None).unwrap();
        let block = v.block("ep").unwrap();
        for token in allowed {
            assert!(
                (token >= block.base_offset && token < block.base_offset + block.size())
                    || token == v.sid_close()
            );
        }
    }

    #[test]
    fn restrict_to_prunes_and_rejects_empty() {
        let registry = registry_of(&[
            ("ep", &[1, 2], "a"),
            ("ep", &[1, 3], "b"),
            ("ep", &[2, 2], "c"),
        ]);
        let trie = build_trie(&registry, "ep").unwrap();
        let subset: BTreeSet<String> = ["b".to_string()].into();
        let pruned = trie.restrict_to(&subset).unwrap();
        assert_eq!(pruned.leaf_count(), 1);
        assert_eq!(pruned.resolve(&[1, 3]), Some("b"));
        assert_eq!(pruned.resolve(&[1, 2]), None);

        let empty: BTreeSet<String> = ["ghost".to_string()].into();
        assert!(matches!(
            trie.restrict_to(&empty),
            Err(DecodeError::NoValidItems)
        ));
    }
}
