//! Constrained beam search over one SID span.
//!
//! The search expands `[SID] c_1 ... c_M [/SID]` with the next-token scores
//! renormalized over the allowed set at every step. Beam scores sum only the
//! code-token log-probabilities; the delimiters are structural and spans
//! have fixed length per type, so no length normalization applies.

use std::collections::{BTreeMap, BTreeSet};

use super::{checked_scores, log_sum_exp, DecodeError, SidTrie};
use crate::catalog::Vocabulary;
use crate::quantizer::SemanticId;
use crate::scorer::Scorer;

/// One ranked candidate: the canonical item, its tuple, and the cumulative
/// renormalized log-probability of the code tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedItem {
    pub item_id: String,
    pub sid: SemanticId,
    pub item_type: String,
    pub score: f64,
}

/// Ranked, deduplicated generation output. `sequences[i]` holds the raw span
/// token ids behind `items[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub items: Vec<RankedItem>,
    pub sequences: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
struct Beam {
    item_type: String,
    node: usize,
    codes: Vec<u32>,
    score: f64,
    /// Span tokens emitted so far, starting with `[SID]`.
    span: Vec<usize>,
    complete: bool,
}

fn beam_order(a: &Beam, b: &Beam) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.item_type.cmp(&b.item_type))
        .then_with(|| a.codes.cmp(&b.codes))
}

/// Expands one full SID span after the prompt and returns up to `width`
/// catalog items ranked by sequence score. An optional item subset prunes
/// the tries to tuples whose canonical item is listed.
pub fn constrained_beam_search<S: Scorer>(
    scorer: &S,
    prompt_ids: &[usize],
    tries: &BTreeMap<String, SidTrie>,
    vocabulary: &Vocabulary,
    width: usize,
    target_type: Option<&str>,
    subset: Option<&BTreeSet<String>>,
) -> Result<GenerationResult, DecodeError> {
    if width == 0 {
        return Err(DecodeError::ZeroWidth);
    }
    crate::sequence::decode(prompt_ids, vocabulary)?;

    // select and optionally prune the candidate tries
    let mut candidates: BTreeMap<&str, SidTrie> = BTreeMap::new();
    let selected: Vec<&str> = match target_type {
        Some(t) => {
            if !tries.contains_key(t) {
                return Err(DecodeError::UnknownItemType {
                    item_type: t.to_string(),
                });
            }
            vec![t]
        }
        None => tries.keys().map(String::as_str).collect(),
    };
    for t in selected {
        let trie = &tries[t];
        match subset {
            Some(items) => match trie.restrict_to(items) {
                Ok(pruned) => {
                    candidates.insert(t, pruned);
                }
                Err(DecodeError::NoValidItems) => {}
                Err(e) => return Err(e),
            },
            None => {
                candidates.insert(t, trie.clone());
            }
        }
    }
    if candidates.is_empty() {
        return Err(DecodeError::NoValidItems);
    }

    let mut context = prompt_ids.to_vec();
    context.push(vocabulary.sid_open());

    // first step: the allowed set unions the root continuations of every
    // candidate type, so the type choice is scored as part of the step
    let scores = checked_scores(scorer, &context, vocabulary)?;
    let mut first: Vec<(f64, &str, u32, usize, usize)> = Vec::new();
    for (t, trie) in &candidates {
        for (code, node) in trie.children(SidTrie::ROOT) {
            let token = vocabulary.sid_token_id(t, 1, code)?;
            first.push((scores[token], t, code, node, token));
        }
    }
    if first.is_empty() {
        return Err(DecodeError::NoValidItems);
    }
    let lse = log_sum_exp(first.iter().map(|(s, ..)| *s));
    let mut beams: Vec<Beam> = first
        .into_iter()
        .map(|(s, t, code, node, token)| {
            let trie = &candidates[t];
            Beam {
                item_type: t.to_string(),
                node,
                codes: vec![code],
                score: s - lse,
                span: vec![vocabulary.sid_open(), token],
                complete: trie.tuple_len() == 1,
            }
        })
        .collect();
    beams.sort_by(beam_order);
    beams.truncate(width);

    while beams.iter().any(|b| !b.complete) {
        let mut next = Vec::with_capacity(beams.len() * 2);
        for beam in beams {
            if beam.complete {
                next.push(beam);
                continue;
            }
            let trie = &candidates[beam.item_type.as_str()];
            let mut context = context.clone();
            context.extend(&beam.span[1..]);
            let scores = checked_scores(scorer, &context, vocabulary)?;
            let position = beam.codes.len() + 1;
            let children: Vec<(u32, usize, usize)> = trie
                .children(beam.node)
                .map(|(code, node)| {
                    vocabulary
                        .sid_token_id(&beam.item_type, position, code)
                        .map(|token| (code, node, token))
                })
                .collect::<Result<_, _>>()?;
            let lse = log_sum_exp(children.iter().map(|(_, _, token)| scores[*token]));
            for (code, node, token) in children {
                let mut codes = beam.codes.clone();
                codes.push(code);
                let mut span = beam.span.clone();
                span.push(token);
                next.push(Beam {
                    item_type: beam.item_type.clone(),
                    node,
                    complete: codes.len() == trie.tuple_len(),
                    codes,
                    score: beam.score + (scores[token] - lse),
                    span,
                });
            }
        }
        next.sort_by(beam_order);
        next.truncate(width);
        beams = next;
    }

    // close the spans and deduplicate beams that resolve to the same
    // canonical item, keeping the best-scored occurrence
    let mut items = Vec::new();
    let mut sequences = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for mut beam in beams {
        beam.span.push(vocabulary.sid_close());
        let trie = &candidates[beam.item_type.as_str()];
        let item_id = trie
            .item_at(beam.node)
            .expect("complete beam ends on a leaf")
            .to_string();
        if !seen.insert(item_id.clone()) {
            continue;
        }
        items.push(RankedItem {
            item_id,
            sid: SemanticId::new(beam.codes),
            item_type: beam.item_type,
            score: beam.score,
        });
        sequences.push(beam.span);
    }
    Ok(GenerationResult { items, sequences })
}

#[cfg(test)]
mod tests {
    use super::super::{build_tries, testutil::registry_of};
    use super::*;
    use crate::embedding::ItemTypeSpace;
    use crate::scorer::uniform_scorer;

    fn vocab() -> Vocabulary {
        Vocabulary::build(
            8,
            &[
                ItemTypeSpace::new("book", 4, 4, 2, 4).unwrap(),
                ItemTypeSpace::new("ep", 4, 4, 2, 4).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn uniform_scorer_width_one_returns_lexicographically_first() {
        let v = vocab();
        let registry = registry_of(&[
            ("ep", &[1, 2], "a"),
            ("ep", &[1, 3], "b"),
            ("ep", &[3, 0], "c"),
            ("book", &[2, 1], "x"),
        ]);
        let tries = build_tries(&registry).unwrap();
        let scorer = uniform_scorer(v.total_size()).unwrap();
        let result =
            constrained_beam_search(&scorer, &[], &tries, &v, 1, None, None).unwrap();
        assert_eq!(result.items.len(), 1);
        // "book" sorts before "ep"; its lexicographically-first tuple is (2,1)
        assert_eq!(result.items[0].item_id, "x");
        assert_eq!(result.items[0].sid.codes(), &[2, 1]);
    }

    #[test]
    fn singleton_subset_wins_regardless_of_scorer() {
        let v = vocab();
        let registry = registry_of(&[
            ("ep", &[1, 2], "a"),
            ("ep", &[1, 3], "b"),
            ("ep", &[3, 0], "c"),
        ]);
        let tries = build_tries(&registry).unwrap();
        let scorer = uniform_scorer(v.total_size()).unwrap();
        let subset: BTreeSet<String> = ["c".to_string()].into();
        let result =
            constrained_beam_search(&scorer, &[], &tries, &v, 5, None, Some(&subset)).unwrap();
        assert_eq!(result.items.len(), 1);
        assert_eq!(result.items[0].item_id, "c");

        let ghost: BTreeSet<String> = ["ghost".to_string()].into();
        assert!(matches!(
            constrained_beam_search(&scorer, &[], &tries, &v, 5, None, Some(&ghost)),
            Err(DecodeError::NoValidItems)
        ));
    }

    #[test]
    fn target_type_keeps_results_in_type() {
        let v = vocab();
        let registry = registry_of(&[
            ("ep", &[1, 2], "a"),
            ("ep", &[1, 3], "b"),
            ("book", &[2, 1], "x"),
        ]);
        let tries = build_tries(&registry).unwrap();
        let scorer = uniform_scorer(v.total_size()).unwrap();
        let result =
            constrained_beam_search(&scorer, &[], &tries, &v, 10, Some("ep"), None).unwrap();
        assert_eq!(result.items.len(), 2);
        assert!(result.items.iter().all(|i| i.item_type == "ep"));
    }

    #[test]
    fn scores_are_non_increasing_and_items_unique() {
        let v = vocab();
        let registry = registry_of(&[
            ("ep", &[0, 0], "a"),
            ("ep", &[0, 1], "a"), // same canonical item under two tuples
            ("ep", &[1, 0], "b"),
            ("ep", &[2, 3], "c"),
        ]);
        let tries = build_tries(&registry).unwrap();
        let scorer = uniform_scorer(v.total_size()).unwrap();
        let result = constrained_beam_search(&scorer, &[], &tries, &v, 10, None, None).unwrap();
        for w in result.items.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        let mut ids: Vec<&str> = result.items.iter().map(|i| i.item_id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), result.items.len());
        assert_eq!(result.items.len(), 3); // a deduplicated
        assert_eq!(result.sequences.len(), result.items.len());
    }

    #[test]
    fn spans_in_sequences_are_well_formed() {
        let v = vocab();
        let registry = registry_of(&[("ep", &[1, 2], "a"), ("ep", &[3, 0], "b")]);
        let tries = build_tries(&registry).unwrap();
        let scorer = uniform_scorer(v.total_size()).unwrap();
        let result = constrained_beam_search(&scorer, &[], &tries, &v, 2, None, None).unwrap();
        for (item, span) in result.items.iter().zip(&result.sequences) {
            let seq = crate::sequence::decode(span, &v).unwrap();
            assert_eq!(seq.span_count(), 1);
            match &seq.segments()[0] {
                crate::sequence::Segment::ItemRef { sid, .. } => {
                    assert_eq!(sid, &item.sid)
                }
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn zero_width_rejected() {
        let v = vocab();
        let registry = registry_of(&[("ep", &[1, 2], "a")]);
        let tries = build_tries(&registry).unwrap();
        let scorer = uniform_scorer(v.total_size()).unwrap();
        assert!(matches!(
            constrained_beam_search(&scorer, &[], &tries, &v, 0, None, None),
            Err(DecodeError::ZeroWidth)
        ));
    }
}
