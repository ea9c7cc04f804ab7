//! Semantic-ID toolkit: turns a heterogeneous item catalog into discrete
//! semantic identifiers (SIDs), builds a unified text+SID token space, and
//! performs catalog-valid constrained generation over a prefix trie.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`embedding`] — loading, pooling, truncating, and normalizing content
//!   embeddings, one space per item type.
//! - [`quantizer`] — residual K-means codebooks (learned) and LSH signatures
//!   (random-projection baseline), plus code-quality diagnostics.
//! - [`catalog`] — catalog entries, the unified token vocabulary, and SID
//!   collision resolution into a registry of canonical items.
//! - [`sequence`] — mixed text–SID sequences, span encoding/decoding, prompt
//!   templates, and training-record construction.
//! - [`scorer`] — the next-token scoring contract plus reference trigram and
//!   uniform scorers; the seam where a real language model plugs in.
//! - [`decoder`] — per-type prefix tries, the span-aware decoding automaton,
//!   constrained beam search, and top-p sampling.
//! - [`eval`] — ranking metrics (HR@K, NDCG@K), brute-force k-NN, Jaccard
//!   neighborhood stability, and SID validity rates.
//! - [`synth`] — a seeded synthetic corpus generator for desk-scale runs.

pub mod catalog;
pub mod decoder;
pub mod embedding;
pub mod eval;
pub mod quantizer;
pub mod scorer;
pub mod sequence;
pub mod synth;

pub use catalog::{CatalogEntry, SidRegistry, Vocabulary};
pub use decoder::{GenerationResult, SidTrie};
pub use embedding::EmbeddingMatrix;
pub use quantizer::{Codebook, LshPlanes, SemanticId};
pub use scorer::Scorer;
pub use sequence::{MixedSequence, Segment, TrainingRecord};
