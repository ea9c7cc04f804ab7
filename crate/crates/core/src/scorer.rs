//! Next-token scoring: the contract the decoder consumes, plus two
//! reference implementations (add-alpha trigram and uniform) that exercise
//! the pipeline end to end without any ML framework. A production language
//! model plugs in behind the same trait.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("vocab_size must be positive")]
    ZeroVocab,
    #[error("smoothing alpha must be positive, got {alpha}")]
    BadAlpha { alpha: f64 },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("token {token} out of range for vocab_size {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },
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
}

/// Source of next-token log-scores over the unified vocabulary.
pub trait Scorer {
    fn vocab_size(&self) -> usize;

    /// Log-scores for every token given the context, length `vocab_size`.
    /// Downstream masking adds -inf outside the allowed set and
    /// renormalizes, so scores need not be normalized here.
    fn next_scores(&self, context: &[usize]) -> Vec<f64>;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_scores(&self, context: &[usize]) -> Vec<f64> {
        (**self).next_scores(context)
    }
}

/// Context-independent constant scores: every token equally likely.
#[derive(Debug, Clone)]
pub struct UniformScorer {
    vocab_size: usize,
    log_prob: f64,
}

pub fn uniform_scorer(vocab_size: usize) -> Result<UniformScorer, ScorerError> {
    if vocab_size == 0 {
        return Err(ScorerError::ZeroVocab);
    }
    Ok(UniformScorer {
        vocab_size,
        log_prob: -(vocab_size as f64).ln(),
    })
}

impl Scorer for UniformScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_scores(&self, _context: &[usize]) -> Vec<f64> {
        vec![self.log_prob; self.vocab_size]
    }
}

/// Sentinel used for positions before the start of a sequence. Stored as
/// `vocab_size` so it never clashes with a real token.
fn bos(vocab_size: usize) -> usize {
    vocab_size
}

/// Add-alpha smoothed trigram counts: P(w | w-2, w-1). Unseen contexts fall
/// back to the uniform distribution. Backoff is smoothing-only.
#[derive(Debug, Clone)]
pub struct TrigramTable {
    alpha: f64,
    vocab_size: usize,
    counts: HashMap<(usize, usize), HashMap<usize, u64>>,
    totals: HashMap<(usize, usize), u64>,
}

/// Trains the table on token sequences. Every token must lie in
/// `[0, vocab_size)`.
pub fn train_trigram(
    corpus: &[Vec<usize>],
    alpha: f64,
    vocab_size: usize,
) -> Result<TrigramTable, ScorerError> {
    if vocab_size == 0 {
        return Err(ScorerError::ZeroVocab);
    }
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(ScorerError::BadAlpha { alpha });
    }
    if corpus.is_empty() || corpus.iter().all(|s| s.is_empty()) {
        return Err(ScorerError::EmptyCorpus);
    }
    let b = bos(vocab_size);
    let mut counts: HashMap<(usize, usize), HashMap<usize, u64>> = HashMap::new();
    let mut totals: HashMap<(usize, usize), u64> = HashMap::new();
    for seq in corpus {
        for (i, &w) in seq.iter().enumerate() {
            if w >= vocab_size {
                return Err(ScorerError::TokenOutOfRange {
                    token: w,
                    vocab_size,
                });
            }
            let w1 = if i >= 1 { seq[i - 1] } else { b };
            let w2 = if i >= 2 { seq[i - 2] } else { b };
            *counts.entry((w2, w1)).or_default().entry(w).or_insert(0) += 1;
            *totals.entry((w2, w1)).or_insert(0) += 1;
        }
    }
    Ok(TrigramTable {
        alpha,
        vocab_size,
        counts,
        totals,
    })
}

impl TrigramTable {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn context_key(&self, context: &[usize]) -> (usize, usize) {
        let b = bos(self.vocab_size);
        let n = context.len();
        let w1 = if n >= 1 { context[n - 1] } else { b };
        let w2 = if n >= 2 { context[n - 2] } else { b };
        (w2, w1)
    }

    /// Log-probabilities over the vocabulary for the given context; always a
    /// proper distribution.
    pub fn log_probs(&self, context: &[usize]) -> Vec<f64> {
        let key = self.context_key(context);
        let total = self.totals.get(&key).copied().unwrap_or(0) as f64;
        let denom = total + self.alpha * self.vocab_size as f64;
        let base = (self.alpha / denom).ln();
        let mut out = vec![base; self.vocab_size];
        if let Some(row) = self.counts.get(&key) {
            for (&w, &c) in row {
                out[w] = ((c as f64 + self.alpha) / denom).ln();
            }
        }
        out
    }
}

impl Scorer for TrigramTable {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_scores(&self, context: &[usize]) -> Vec<f64> {
        self.log_probs(context)
    }
}

/// Wraps a scorer so that chosen token ids (span delimiters, typically) are
/// invisible when the inner scorer reads its context. Delimiters are
/// structural: the decoding automaton owns them, while the n-gram statistics
/// live on the content tokens on either side.
#[derive(Debug, Clone)]
pub struct TransparentContext<S> {
    inner: S,
    skip: BTreeSet<usize>,
}

impl<S: Scorer> TransparentContext<S> {
    pub fn new(inner: S, skip: impl IntoIterator<Item = usize>) -> Self {
        Self {
            inner,
            skip: skip.into_iter().collect(),
        }
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<S: Scorer> Scorer for TransparentContext<S> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn next_scores(&self, context: &[usize]) -> Vec<f64> {
        let filtered: Vec<usize> = context
            .iter()
            .copied()
            .filter(|t| !self.skip.contains(t))
            .collect();
        self.inner.next_scores(&filtered)
    }
}

/// Trigram persistence: a header line `alpha TAB vocab_size`, then one line
/// per observed trigram `w-2 TAB w-1 TAB w TAB count`. The before-start
/// sentinel is written as the literal value `vocab_size`.
pub fn store_trigram(path: &Path, table: &TrigramTable) -> Result<(), ScorerError> {
    let mut lines: Vec<String> = Vec::with_capacity(table.totals.len() + 1);
    lines.push(format!("{}\t{}", table.alpha, table.vocab_size));
    let mut rows: Vec<(usize, usize, usize, u64)> = table
        .counts
        .iter()
        .flat_map(|(&(w2, w1), row)| row.iter().map(move |(&w, &c)| (w2, w1, w, c)))
        .collect();
    rows.sort_unstable();
    for (w2, w1, w, c) in rows {
        lines.push(format!("{w2}\t{w1}\t{w}\t{c}"));
    }
    fs::write(path, lines.join("\n") + "\n").map_err(|e| ScorerError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_trigram(path: &Path) -> Result<TrigramTable, ScorerError> {
    let text = fs::read_to_string(path).map_err(|e| ScorerError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let p = path.display().to_string();
    let parse_err = |line: usize, reason: String| ScorerError::Parse {
        path: p.clone(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?;
    let parts: Vec<&str> = header.split('\t').collect();
    if parts.len() != 2 {
        return Err(parse_err(1, "header needs `alpha TAB vocab_size`".into()));
    }
    let alpha: f64 = parts[0]
        .parse()
        .map_err(|_| parse_err(1, format!("bad alpha {:?}", parts[0])))?;
    let vocab_size: usize = parts[1]
        .parse()
        .map_err(|_| parse_err(1, format!("bad vocab_size {:?}", parts[1])))?;
    if vocab_size == 0 {
        return Err(ScorerError::ZeroVocab);
    }
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(ScorerError::BadAlpha { alpha });
    }
    let mut counts: HashMap<(usize, usize), HashMap<usize, u64>> = HashMap::new();
    let mut totals: HashMap<(usize, usize), u64> = HashMap::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(i + 1, format!("expected 4 fields, got {}", fields.len())));
        }
        let nums: Result<Vec<u64>, _> = fields.iter().map(|f| f.parse::<u64>()).collect();
        let nums = nums.map_err(|_| parse_err(i + 1, "non-numeric field".into()))?;
        let (w2, w1, w, c) = (nums[0] as usize, nums[1] as usize, nums[2] as usize, nums[3]);
        if w >= vocab_size || w2 > vocab_size || w1 > vocab_size {
            return Err(parse_err(i + 1, "token outside vocabulary".into()));
        }
        *counts.entry((w2, w1)).or_default().entry(w).or_insert(0) += c;
        *totals.entry((w2, w1)).or_insert(0) += c;
    }
    Ok(TrigramTable {
        alpha,
        vocab_size,
        counts,
        totals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trigram_argmax_follows_counts() {
        let corpus = vec![vec![1, 2, 3], vec![1, 2, 3]];
        let table = train_trigram(&corpus, 0.5, 5).unwrap();
        let scores = table.next_scores(&[1, 2]);
        let argmax = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 3);
    }

    #[test]
    fn unseen_context_is_uniform() {
        let corpus = vec![vec![1, 2, 3]];
        let table = train_trigram(&corpus, 1.0, 4).unwrap();
        let scores = table.next_scores(&[3, 3]);
        for w in scores.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_form_a_distribution() {
        let corpus = vec![vec![0, 1, 2, 1, 0], vec![2, 2, 2], vec![0, 3]];
        let table = train_trigram(&corpus, 0.25, 4).unwrap();
        for context in [vec![], vec![0], vec![0, 1], vec![1, 2], vec![9, 9]] {
            let sum: f64 = table.next_scores(&context).iter().map(|s| s.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-9, "sum {sum} for context {context:?}");
        }
    }

    #[test]
    fn empty_corpus_and_bad_alpha_rejected() {
        assert!(matches!(
            train_trigram(&[], 1.0, 4),
            Err(ScorerError::EmptyCorpus)
        ));
        assert!(matches!(
            train_trigram(&[vec![1]], 0.0, 4),
            Err(ScorerError::BadAlpha { .. })
        ));
    }

    #[test]
    fn uniform_scorer_is_flat_and_context_free() {
        let s = uniform_scorer(7).unwrap();
        let a = s.next_scores(&[]);
        let b = s.next_scores(&[1, 2, 3]);
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        assert!(uniform_scorer(0).is_err());
    }

    #[test]
    fn transparent_context_skips_marked_tokens() {
        let corpus = vec![vec![1, 2, 3], vec![1, 2, 3]];
        let table = train_trigram(&corpus, 0.5, 10).unwrap();
        let wrapped = TransparentContext::new(&table, [8, 9]);
        // context (1, 8, 2, 9) reads as (1, 2) after filtering
        let direct = table.next_scores(&[1, 2]);
        let filtered = wrapped.next_scores(&[1, 8, 2, 9]);
        assert_eq!(direct, filtered);
    }

    #[test]
    fn trigram_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trigram.tsv");
        let corpus = vec![vec![0, 1, 2, 3, 1, 2], vec![3, 2, 1]];
        let table = train_trigram(&corpus, 0.5, 6).unwrap();
        store_trigram(&path, &table).unwrap();
        let back = load_trigram(&path).unwrap();
        assert_eq!(table.alpha, back.alpha);
        assert_eq!(table.vocab_size, back.vocab_size);
        for context in [vec![], vec![0], vec![1, 2], vec![3, 2]] {
            assert_eq!(table.next_scores(&context), back.next_scores(&context));
        }
    }
}
