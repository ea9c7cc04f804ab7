//! Mixed text–SID sequences: the grammar every model input and output uses.
//!
//! A sequence alternates free text with typed item references. On the token
//! side an item reference is an explicit span
//! `[SID] c_1 ... c_M [/SID]` over the item type's SID block; text tokens
//! never appear inside a span and SID tokens never appear outside one.

mod datagen;
mod templates;
mod text;

pub use datagen::{
    annotations_to_string, build_alignment_records, build_instruction_records, eval_prompt_ids,
    load_annotations, load_logs, logs_to_string, scorer_corpus, store_logs, temporal_split,
    Annotations, DatagenOptions, EvalPair, LogEvent, SidIndex,
};
pub use templates::{render_prompt, FieldValue, Fields, RenderedPrompt, TEMPLATES_PER_TASK};
pub use text::tokenize_text;

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{CatalogError, Vocabulary};
use crate::quantizer::SemanticId;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error(transparent)]
    Vocab(#[from] CatalogError),
    #[error("text token {token} outside the text range")]
    TextTokenOutOfRange { token: usize },
    #[error("token {token} at index {index} is outside the vocabulary")]
    UnknownToken { index: usize, token: usize },
    #[error("unclosed span: sequence ended inside [SID]...[/SID]")]
    UnclosedSpan,
    #[error("[/SID] at index {index} without a matching [SID]")]
    CloseWithoutOpen { index: usize },
    #[error("incomplete span: [/SID] at index {index} after {got} of {expected} codes")]
    IncompleteSpan {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("stray SID token {token} at index {index} outside any span")]
    StraySidToken { index: usize, token: usize },
    #[error("position-order violation at index {index}: got a token for position {found} where position {expected} was expected")]
    PositionOrder {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("unexpected token {token} at index {index} inside a span")]
    UnexpectedInSpan { index: usize, token: usize },
    #[error("template for task {task} has no placeholder value for {{{placeholder}}}")]
    MissingPlaceholder { task: String, placeholder: String },
    #[error("placeholder {{{placeholder}}} needs a {expected} value")]
    WrongFieldKind {
        placeholder: String,
        expected: &'static str,
    },
    #[error("unknown task label {label:?}")]
    UnknownTask { label: String },
    #[error("empty query for item {item_id}")]
    EmptyQuery { item_id: String },
    #[error("item {item_id} appears in the logs but not in the registry")]
    UnregisteredItem { item_id: String },
    #[error("gap days must be >= 1")]
    ZeroGap,
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

/// One segment of a mixed sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    /// Token ids from the text range.
    Text(Vec<usize>),
    /// A typed item reference, encoded as a delimited SID span.
    ItemRef { item_type: String, sid: SemanticId },
}

/// Alternating text and item references. Normalized: text segments are
/// non-empty and never adjacent.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MixedSequence {
    segments: Vec<Segment>,
}

impl MixedSequence {
    pub fn new(segments: Vec<Segment>) -> Self {
        let mut out = Self::default();
        for seg in segments {
            out.push(seg);
        }
        out
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Number of item-reference segments.
    pub fn span_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| matches!(s, Segment::ItemRef { .. }))
            .count()
    }

    /// Appends a segment, merging adjacent text runs and dropping empty
    /// text.
    pub fn push(&mut self, segment: Segment) {
        match segment {
            Segment::Text(ids) if ids.is_empty() => {}
            Segment::Text(ids) => {
                if let Some(Segment::Text(prev)) = self.segments.last_mut() {
                    prev.extend(ids);
                } else {
                    self.segments.push(Segment::Text(ids));
                }
            }
            item => self.segments.push(item),
        }
    }
}

/// Serializes a mixed sequence to token ids. Item references become
/// `[SID] c_1 ... c_M [/SID]` spans; text passes through unchanged.
pub fn encode(seq: &MixedSequence, vocabulary: &Vocabulary) -> Result<Vec<usize>, SequenceError> {
    let mut out = Vec::new();
    for segment in &seq.segments {
        match segment {
            Segment::Text(ids) => {
                for &id in ids {
                    if !vocabulary.is_text(id) {
                        return Err(SequenceError::TextTokenOutOfRange { token: id });
                    }
                }
                out.extend_from_slice(ids);
            }
            Segment::ItemRef { item_type, sid } => {
                out.push(vocabulary.sid_open());
                for (i, &code) in sid.codes().iter().enumerate() {
                    out.push(vocabulary.sid_token_id(item_type, i + 1, code)?);
                }
                out.push(vocabulary.sid_close());
            }
        }
    }
    Ok(out)
}

/// Parses token ids back into a mixed sequence, validating span shape: every
/// span opens with `[SID]`, carries exactly M codes of one type in position
/// order, and closes with `[/SID]`.
pub fn decode(ids: &[usize], vocabulary: &Vocabulary) -> Result<MixedSequence, SequenceError> {
    let mut seq = MixedSequence::default();
    let mut text_run: Vec<usize> = Vec::new();
    // (item_type, m, codes read so far)
    let mut span: Option<(String, usize, Vec<u32>)> = None;

    for (index, &token) in ids.iter().enumerate() {
        if token >= vocabulary.total_size() {
            return Err(SequenceError::UnknownToken { index, token });
        }
        match span.as_mut() {
            None => {
                if token == vocabulary.sid_open() {
                    seq.push(Segment::Text(std::mem::take(&mut text_run)));
                    span = Some((String::new(), 0, Vec::new()));
                } else if token == vocabulary.sid_close() {
                    return Err(SequenceError::CloseWithoutOpen { index });
                } else if vocabulary.is_text(token) {
                    text_run.push(token);
                } else {
                    return Err(SequenceError::StraySidToken { index, token });
                }
            }
            Some((item_type, m, codes)) => {
                if token == vocabulary.sid_close() {
                    if codes.len() < *m || codes.is_empty() {
                        return Err(SequenceError::IncompleteSpan {
                            index,
                            got: codes.len(),
                            expected: *m,
                        });
                    }
                    let (item_type, _, codes) = span.take().unwrap();
                    seq.push(Segment::ItemRef {
                        item_type,
                        sid: SemanticId::new(codes),
                    });
                } else if let Some((token_type, position, code)) = vocabulary.token_triple(token) {
                    if codes.is_empty() {
                        if position != 1 {
                            return Err(SequenceError::PositionOrder {
                                index,
                                expected: 1,
                                found: position,
                            });
                        }
                        let block = vocabulary.block(token_type).expect("triple implies block");
                        *item_type = token_type.to_string();
                        *m = block.m;
                        codes.push(code);
                    } else {
                        if token_type != item_type {
                            return Err(SequenceError::UnexpectedInSpan { index, token });
                        }
                        let expected = codes.len() + 1;
                        if position != expected {
                            return Err(SequenceError::PositionOrder {
                                index,
                                expected,
                                found: position,
                            });
                        }
                        codes.push(code);
                    }
                } else {
                    // text token or a nested [SID] inside an open span
                    return Err(SequenceError::UnexpectedInSpan { index, token });
                }
            }
        }
    }
    if span.is_some() {
        return Err(SequenceError::UnclosedSpan);
    }
    seq.push(Segment::Text(text_run));
    Ok(seq)
}

/// True when the ids parse as a well-formed mixed sequence and every item
/// reference resolves to a registered tuple.
pub fn spans_resolve(
    ids: &[usize],
    registry: &crate::catalog::SidRegistry,
    vocabulary: &Vocabulary,
) -> bool {
    let Ok(seq) = decode(ids, vocabulary) else {
        return false;
    };
    seq.segments().iter().all(|segment| match segment {
        Segment::Text(_) => true,
        Segment::ItemRef { item_type, sid } => {
            registry.resolve(item_type, sid.codes()).is_some()
        }
    })
}

/// Task families for training records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Recommend,
    Retrieve,
    Recsplain,
    Profile,
    AlignS2t,
    AlignT2s,
    AlignS2type,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::Recommend,
        Task::Retrieve,
        Task::Recsplain,
        Task::Profile,
        Task::AlignS2t,
        Task::AlignT2s,
        Task::AlignS2type,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Task::Recommend => "recommend",
            Task::Retrieve => "retrieve",
            Task::Recsplain => "recsplain",
            Task::Profile => "profile",
            Task::AlignS2t => "align_s2t",
            Task::AlignT2s => "align_t2s",
            Task::AlignS2type => "align_s2type",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Task {
    type Err = SequenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .iter()
            .copied()
            .find(|t| t.label() == s)
            .ok_or_else(|| SequenceError::UnknownTask {
                label: s.to_string(),
            })
    }
}

/// A prefix-completion training pair. The loss boundary is the encoded
/// prompt length: the loss applies only to completion tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub task: Task,
    pub prompt: MixedSequence,
    pub completion: MixedSequence,
    pub loss_boundary: usize,
    pub rendering: String,
}

impl TrainingRecord {
    pub fn new(
        task: Task,
        prompt: MixedSequence,
        completion: MixedSequence,
        vocabulary: &Vocabulary,
        rendering: String,
    ) -> Result<Self, SequenceError> {
        let loss_boundary = encode(&prompt, vocabulary)?.len();
        Ok(Self {
            task,
            prompt,
            completion,
            loss_boundary,
            rendering,
        })
    }
}

/// On-disk form of a training record: one JSON object per line with the
/// token-id arrays plus the human-readable rendering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordLine {
    pub task: Task,
    pub prompt_ids: Vec<usize>,
    pub completion_ids: Vec<usize>,
    pub loss_boundary: usize,
    pub rendering: String,
}

impl RecordLine {
    pub fn from_record(
        record: &TrainingRecord,
        vocabulary: &Vocabulary,
    ) -> Result<Self, SequenceError> {
        let prompt_ids = encode(&record.prompt, vocabulary)?;
        let completion_ids = encode(&record.completion, vocabulary)?;
        debug_assert_eq!(record.loss_boundary, prompt_ids.len());
        Ok(Self {
            task: record.task,
            prompt_ids,
            completion_ids,
            loss_boundary: record.loss_boundary,
            rendering: record.rendering.clone(),
        })
    }
}

/// Serializes records as line-delimited JSON.
pub fn records_to_string(
    records: &[TrainingRecord],
    vocabulary: &Vocabulary,
) -> Result<String, SequenceError> {
    let mut out = String::new();
    for record in records {
        let line = RecordLine::from_record(record, vocabulary)?;
        out.push_str(&serde_json::to_string(&line).expect("record serializes"));
        out.push('\n');
    }
    Ok(out)
}
