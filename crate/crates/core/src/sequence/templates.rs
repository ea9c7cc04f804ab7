//! Prompt templates: 20 wording variants per task family, enumerated in a
//! versioned template file and selected deterministically by seed.
//!
//! Every template spells out the task, the target entity type, and the
//! expected output format. Placeholders are `{name}`; text placeholders take
//! a string, `{history}` and `{item}` take item references.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use super::text::tokenize_text;
use super::{MixedSequence, Segment, SequenceError, Task};
use crate::catalog::Vocabulary;
use crate::quantizer::SemanticId;

pub const TEMPLATES_PER_TASK: usize = 20;

const TEMPLATE_FILE: &str = include_str!("templates.txt");

/// Pieces of a parsed template: literal text and named placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Literal(String),
    Placeholder(String),
}

fn parse_pieces(body: &str) -> Vec<Piece> {
    let mut pieces = Vec::new();
    let mut literal = String::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        if let Some(close_rel) = rest[open..].find('}') {
            let close = open + close_rel;
            literal.push_str(&rest[..open]);
            if !literal.is_empty() {
                pieces.push(Piece::Literal(std::mem::take(&mut literal)));
            }
            pieces.push(Piece::Placeholder(rest[open + 1..close].to_string()));
            rest = &rest[close + 1..];
        } else {
            break;
        }
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        pieces.push(Piece::Literal(literal));
    }
    pieces
}

fn templates() -> &'static BTreeMap<Task, Vec<Vec<Piece>>> {
    static CACHE: OnceLock<BTreeMap<Task, Vec<Vec<Piece>>>> = OnceLock::new();
    CACHE.get_or_init(|| {
        let mut map: BTreeMap<Task, Vec<Vec<Piece>>> = BTreeMap::new();
        let mut task: Option<Task> = None;
        let mut body = String::new();
        let flush = |task: &Option<Task>, body: &mut String, map: &mut BTreeMap<_, Vec<_>>| {
            if let Some(t) = task {
                let trimmed = body.trim_end().to_string();
                map.entry(*t).or_default().push(parse_pieces(&trimmed));
            }
            body.clear();
        };
        for line in TEMPLATE_FILE.lines() {
            if line.starts_with('#') {
                continue;
            }
            if let Some(label) = line.strip_prefix("--- ") {
                flush(&task, &mut body, &mut map);
                task = Some(label.trim().parse().expect("template file task label"));
            } else if task.is_some() {
                body.push_str(line);
                body.push('\n');
            }
        }
        flush(&task, &mut body, &mut map);
        map
    })
}

/// A placeholder value: free text or one-or-more item references.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldValue {
    Text(String),
    Items(Vec<(String, SemanticId)>),
}

pub type Fields = BTreeMap<String, FieldValue>;

/// A rendered prompt plus its human-readable form, kept alongside the token
/// sequence for the record files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub sequence: MixedSequence,
    pub rendering: String,
}

pub(crate) fn render_item_ref(item_type: &str, sid: &SemanticId) -> String {
    format!("[SID] {item_type}:{sid} [/SID]")
}

/// Instantiates one of the task's templates, chosen by
/// `template_seed % TEMPLATES_PER_TASK`. Deterministic; fails when the
/// fields are missing a placeholder the template needs.
pub fn render_prompt(
    task: Task,
    template_seed: u64,
    fields: &Fields,
    vocabulary: &Vocabulary,
) -> Result<RenderedPrompt, SequenceError> {
    let family = &templates()[&task];
    let template = &family[(template_seed % family.len() as u64) as usize];

    let mut sequence = MixedSequence::default();
    let mut rendering = String::new();
    for piece in template {
        match piece {
            Piece::Literal(text) => {
                sequence.push(Segment::Text(tokenize_text(text, vocabulary)));
                rendering.push_str(text);
            }
            Piece::Placeholder(name) => {
                let value =
                    fields
                        .get(name)
                        .ok_or_else(|| SequenceError::MissingPlaceholder {
                            task: task.label().to_string(),
                            placeholder: name.clone(),
                        })?;
                match value {
                    FieldValue::Text(text) => {
                        sequence.push(Segment::Text(tokenize_text(text, vocabulary)));
                        rendering.push_str(text);
                    }
                    FieldValue::Items(items) => {
                        for (i, (item_type, sid)) in items.iter().enumerate() {
                            if i > 0 {
                                rendering.push(' ');
                            }
                            sequence.push(Segment::ItemRef {
                                item_type: item_type.clone(),
                                sid: sid.clone(),
                            });
                            rendering.push_str(&render_item_ref(item_type, sid));
                        }
                    }
                }
            }
        }
    }
    Ok(RenderedPrompt {
        sequence,
        rendering,
    })
}
