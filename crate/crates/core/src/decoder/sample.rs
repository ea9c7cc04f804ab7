//! Sampled and greedy generation: constrained top-p sampling under the span
//! automaton, plus the unconstrained ablation with a validity flag.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{allowed_tokens, checked_scores, DecodeError, DecodeState, SidTrie};
use crate::catalog::{SidRegistry, Vocabulary, END_OF_TEXT};
use crate::scorer::Scorer;
use crate::sequence::spans_resolve;

fn validate_params(temperature: f64, top_k: usize, top_p: f64) -> Result<(), DecodeError> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(DecodeError::BadTemperature { temperature });
    }
    if top_p <= 0.0 || top_p > 1.0 {
        return Err(DecodeError::BadTopP { top_p });
    }
    if top_k == 0 {
        return Err(DecodeError::ZeroTopK);
    }
    Ok(())
}

/// Temperature, top-k, then nucleus filtering over an allowed set, and one
/// sample from what remains. Candidates sort by probability with ties to the
/// lower token id, so the kept set is deterministic.
fn sample_step(
    scores: &[f64],
    allowed: &[usize],
    temperature: f64,
    top_k: usize,
    top_p: f64,
    rng: &mut ChaCha8Rng,
) -> usize {
    let lse = super::log_sum_exp(allowed.iter().map(|&t| scores[t] / temperature));
    let mut candidates: Vec<(usize, f64)> = allowed
        .iter()
        .map(|&t| (t, (scores[t] / temperature - lse).exp()))
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    candidates.truncate(top_k);

    let mut kept = 0usize;
    let mut mass = 0.0f64;
    for (i, (_, p)) in candidates.iter().enumerate() {
        mass += p;
        kept = i + 1;
        if mass >= top_p {
            break;
        }
    }
    candidates.truncate(kept.max(1));

    let total: f64 = candidates.iter().map(|(_, p)| p).sum();
    let draw: f64 = rng.gen::<f64>() * total;
    let mut cumulative = 0.0;
    for (token, p) in &candidates {
        cumulative += p;
        if draw < cumulative {
            return *token;
        }
    }
    candidates.last().expect("at least one candidate").0
}

/// Constrained sampling: every step masks to the automaton's allowed set,
/// applies temperature, keeps the top-k by probability, then the smallest
/// nucleus with cumulative mass >= top_p, renormalizes, and samples under
/// the seed. Stops after `max_len` emitted tokens or at end-of-text.
#[allow(clippy::too_many_arguments)]
pub fn sample_top_p<S: Scorer>(
    scorer: &S,
    prompt_ids: &[usize],
    tries: &BTreeMap<String, SidTrie>,
    vocabulary: &Vocabulary,
    target_type: Option<&str>,
    temperature: f64,
    top_k: usize,
    top_p: f64,
    seed: u64,
    max_len: usize,
) -> Result<Vec<usize>, DecodeError> {
    validate_params(temperature, top_k, top_p)?;
    crate::sequence::decode(prompt_ids, vocabulary)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = DecodeState::new();
    let mut context = prompt_ids.to_vec();

    while state.emitted.len() < max_len {
        let allowed = allowed_tokens(&state, tries, vocabulary, target_type)?;
        if allowed.is_empty() {
            return Err(DecodeError::NoValidItems);
        }
        let scores = checked_scores(scorer, &context, vocabulary)?;
        let token = sample_step(&scores, &allowed, temperature, top_k, top_p, &mut rng);
        state.advance(token, tries, vocabulary)?;
        context.push(token);
        if token == END_OF_TEXT {
            break;
        }
    }
    Ok(state.emitted)
}

/// Decoding mode for the unconstrained ablation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GenMode {
    /// Argmax at every step, ties to the lower token id.
    Greedy { max_len: usize },
    /// The same temperature/top-k/top-p pipeline, over the whole vocabulary.
    TopP {
        temperature: f64,
        top_k: usize,
        top_p: f64,
        seed: u64,
        max_len: usize,
    },
}

/// Generation without trie masking. Span delimiters still structure the
/// output: the validity flag reports whether the emitted ids parse and every
/// span resolves in the registry.
pub fn unconstrained_generate<S: Scorer>(
    scorer: &S,
    prompt_ids: &[usize],
    vocabulary: &Vocabulary,
    registry: &SidRegistry,
    mode: GenMode,
) -> Result<(Vec<usize>, bool), DecodeError> {
    let max_len = match mode {
        GenMode::Greedy { max_len } => max_len,
        GenMode::TopP {
            temperature,
            top_k,
            top_p,
            max_len,
            ..
        } => {
            validate_params(temperature, top_k, top_p)?;
            max_len
        }
    };
    let all: Vec<usize> = (0..vocabulary.total_size()).collect();
    let mut rng = match mode {
        GenMode::TopP { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        GenMode::Greedy { .. } => None,
    };
    let mut context = prompt_ids.to_vec();
    let mut emitted = Vec::new();

    while emitted.len() < max_len {
        let scores = checked_scores(scorer, &context, vocabulary)?;
        let token = match mode {
            GenMode::Greedy { .. } => {
                let mut best = 0usize;
                for (t, &s) in scores.iter().enumerate() {
                    if s > scores[best] {
                        best = t;
                    }
                }
                best
            }
            GenMode::TopP {
                temperature,
                top_k,
                top_p,
                ..
            } => sample_step(
                &scores,
                &all,
                temperature,
                top_k,
                top_p,
                rng.as_mut().expect("rng set for TopP"),
            ),
        };
        emitted.push(token);
        context.push(token);
        if token == END_OF_TEXT {
            break;
        }
    }
    let valid = spans_resolve(&emitted, registry, vocabulary);
    Ok((emitted, valid))
}
