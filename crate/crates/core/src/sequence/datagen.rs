//! Training-record construction from interaction logs and catalog entries:
//! alignment pairs, instruction-task records, and the leakage-free temporal
//! split.
//!
//! Interaction log file: line-delimited `user_id TAB item_id TAB day_index`,
//! sorted by (user_id, day_index). Annotation file (optional): line-delimited
//! `user_id TAB kind TAB text` where kind is `rationale` or `profile`; the
//! texts arrive as log annotations, never generated here.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::templates::{render_item_ref, render_prompt, FieldValue, Fields};
use super::text::fnv1a;
use super::{tokenize_text, MixedSequence, Segment, SequenceError, Task, TrainingRecord};
use crate::catalog::{escape_field, unescape_field, CatalogEntry, Vocabulary};
use crate::quantizer::SemanticId;

/// Item id -> (item type, registered tuple). Built from the registry so a
/// permuted registry flows through every record builder.
pub type SidIndex = BTreeMap<String, (String, Vec<u32>)>;

/// One interaction: a user consumed an item on a day.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEvent {
    pub user_id: String,
    pub item_id: String,
    pub day: u32,
}

/// Optional distilled texts keyed by user id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Annotations {
    pub rationales: BTreeMap<String, String>,
    pub profiles: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatagenOptions {
    /// Most recent interactions kept in any prompt history.
    pub history_limit: usize,
    /// Base seed for template selection and cut-point sampling.
    pub template_seed: u64,
    /// Days between the last context event and the recommend label.
    pub gap_days: u32,
}

impl Default for DatagenOptions {
    fn default() -> Self {
        Self {
            history_limit: 50,
            template_seed: 0,
            gap_days: 1,
        }
    }
}

pub fn load_logs(path: &Path) -> Result<Vec<LogEvent>, SequenceError> {
    let text = fs::read_to_string(path).map_err(|e| SequenceError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let p = path.display().to_string();
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(SequenceError::Parse {
                path: p.clone(),
                line: i + 1,
                reason: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let day: u32 = fields[2].parse().map_err(|_| SequenceError::Parse {
            path: p.clone(),
            line: i + 1,
            reason: format!("bad day index {:?}", fields[2]),
        })?;
        let event = LogEvent {
            user_id: fields[0].to_string(),
            item_id: fields[1].to_string(),
            day,
        };
        if let Some(prev) = events.last() {
            let prev: &LogEvent = prev;
            if (prev.user_id.as_str(), prev.day) > (event.user_id.as_str(), event.day) {
                return Err(SequenceError::Parse {
                    path: p.clone(),
                    line: i + 1,
                    reason: "log not sorted by (user_id, day_index)".to_string(),
                });
            }
        }
        events.push(event);
    }
    Ok(events)
}

pub fn logs_to_string(events: &[LogEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&format!("{}\t{}\t{}\n", e.user_id, e.item_id, e.day));
    }
    out
}

pub fn store_logs(path: &Path, events: &[LogEvent]) -> Result<(), SequenceError> {
    fs::write(path, logs_to_string(events)).map_err(|e| SequenceError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_annotations(path: &Path) -> Result<Annotations, SequenceError> {
    let text = fs::read_to_string(path).map_err(|e| SequenceError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let p = path.display().to_string();
    let mut annotations = Annotations::default();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(SequenceError::Parse {
                path: p.clone(),
                line: i + 1,
                reason: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let target = match fields[1] {
            "rationale" => &mut annotations.rationales,
            "profile" => &mut annotations.profiles,
            other => {
                return Err(SequenceError::Parse {
                    path: p.clone(),
                    line: i + 1,
                    reason: format!("unknown annotation kind {other:?}"),
                })
            }
        };
        target.insert(fields[0].to_string(), unescape_field(fields[2]));
    }
    Ok(annotations)
}

pub fn annotations_to_string(annotations: &Annotations) -> String {
    let mut out = String::new();
    for (user, text) in &annotations.rationales {
        out.push_str(&format!("{user}\trationale\t{}\n", escape_field(text)));
    }
    for (user, text) in &annotations.profiles {
        out.push_str(&format!("{user}\tprofile\t{}\n", escape_field(text)));
    }
    out
}

/// One held-out evaluation case from the temporal split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub user_id: String,
    pub context: Vec<LogEvent>,
    pub label: LogEvent,
}

/// Splits logs at day `t` with gap `k`: training keeps events up to `t`;
/// each user's eval label is their first event on or after `t + k`. Nothing
/// strictly between `t` and `t + k` reaches either side.
pub fn temporal_split(
    events: &[LogEvent],
    t: u32,
    k: u32,
) -> Result<(Vec<LogEvent>, Vec<EvalPair>), SequenceError> {
    if k == 0 {
        return Err(SequenceError::ZeroGap);
    }
    let train: Vec<LogEvent> = events.iter().filter(|e| e.day <= t).cloned().collect();

    let mut per_user: BTreeMap<&str, Vec<&LogEvent>> = BTreeMap::new();
    for e in events {
        per_user.entry(&e.user_id).or_default().push(e);
    }
    let mut pairs = Vec::new();
    for (user, user_events) in per_user {
        let label = user_events.iter().find(|e| e.day >= t + k);
        let Some(label) = label else { continue };
        let context: Vec<LogEvent> = user_events
            .iter()
            .filter(|e| e.day <= t)
            .map(|e| (*e).clone())
            .collect();
        pairs.push(EvalPair {
            user_id: user.to_string(),
            context,
            label: (*label).clone(),
        });
    }
    Ok((train, pairs))
}

fn first_sentence(text: &str) -> &str {
    let end = text
        .char_indices()
        .find(|(_, c)| matches!(c, '.' | '!' | '?'))
        .map(|(i, _)| i + 1);
    match end {
        Some(i) => text[..i].trim_end(),
        None => text.trim_end(),
    }
}

/// Query text for grounded retrieval: title plus the first sentence of the
/// description.
pub(crate) fn query_text(entry: &CatalogEntry) -> String {
    let sentence = first_sentence(&entry.description);
    if sentence.is_empty() {
        entry.title.clone()
    } else {
        format!("{} {}", entry.title, sentence)
    }
}

/// Short textual descriptor for verbalization records.
fn descriptor_text(entry: &CatalogEntry) -> String {
    let sentence = first_sentence(&entry.description);
    if sentence.is_empty() {
        entry.title.clone()
    } else {
        format!("{}. {}", entry.title, sentence)
    }
}

const COUNTRIES: [&str; 8] = ["US", "SE", "DE", "FR", "GB", "ES", "BR", "JP"];
const LANGUAGES: [&str; 6] = ["en", "sv", "de", "fr", "es", "pt"];

/// Deterministic lightweight user features derived from the user id; stand
/// in for account metadata that logs do not carry.
fn user_features(user_id: &str) -> (&'static str, &'static str) {
    let h = fnv1a(user_id.as_bytes());
    (
        COUNTRIES[(h % COUNTRIES.len() as u64) as usize],
        LANGUAGES[((h >> 8) % LANGUAGES.len() as u64) as usize],
    )
}

fn record_seed(base: u64, salt: &str) -> u64 {
    base ^ fnv1a(salt.as_bytes())
}

fn combined_rendering(prompt: &str, completion: &str) -> String {
    format!("{prompt}\n>>> {completion}")
}

fn completion_item(
    item_type: &str,
    sid: &SemanticId,
) -> (MixedSequence, String) {
    let seq = MixedSequence::new(vec![Segment::ItemRef {
        item_type: item_type.to_string(),
        sid: sid.clone(),
    }]);
    (seq, render_item_ref(item_type, sid))
}

/// Builds the three alignment records per catalog item: identifier-to-text,
/// text-to-identifier, and identifier-to-type. Entries with an empty title
/// are skipped; the skip count is returned beside the records.
pub fn build_alignment_records(
    entries: &[CatalogEntry],
    vocabulary: &Vocabulary,
    options: &DatagenOptions,
) -> Result<(Vec<TrainingRecord>, usize), SequenceError> {
    let mut sorted: Vec<&CatalogEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.item_id.cmp(&b.item_id));

    let mut records = Vec::new();
    let mut skipped = 0usize;
    for entry in sorted {
        if entry.title.trim().is_empty() {
            skipped += 1;
            continue;
        }
        let seed = record_seed(options.template_seed, &entry.item_id);
        let item_field = FieldValue::Items(vec![(entry.item_type.clone(), entry.sid.clone())]);

        // identifier -> text
        let mut fields = Fields::new();
        fields.insert("item".into(), item_field.clone());
        let prompt = render_prompt(Task::AlignS2t, seed, &fields, vocabulary)?;
        let text = descriptor_text(entry);
        let completion = MixedSequence::new(vec![Segment::Text(tokenize_text(&text, vocabulary))]);
        records.push(TrainingRecord::new(
            Task::AlignS2t,
            prompt.sequence,
            completion,
            vocabulary,
            combined_rendering(&prompt.rendering, &text),
        )?);

        // text -> identifier
        let query = query_text(entry);
        if query.trim().is_empty() {
            return Err(SequenceError::EmptyQuery {
                item_id: entry.item_id.clone(),
            });
        }
        let mut fields = Fields::new();
        fields.insert("query".into(), FieldValue::Text(query));
        fields.insert(
            "target_type".into(),
            FieldValue::Text(entry.item_type.clone()),
        );
        let prompt = render_prompt(Task::AlignT2s, seed, &fields, vocabulary)?;
        let (completion, completion_rendering) = completion_item(&entry.item_type, &entry.sid);
        records.push(TrainingRecord::new(
            Task::AlignT2s,
            prompt.sequence,
            completion,
            vocabulary,
            combined_rendering(&prompt.rendering, &completion_rendering),
        )?);

        // identifier -> type
        let mut fields = Fields::new();
        fields.insert("item".into(), item_field);
        let prompt = render_prompt(Task::AlignS2type, seed, &fields, vocabulary)?;
        let completion = MixedSequence::new(vec![Segment::Text(tokenize_text(
            &entry.item_type,
            vocabulary,
        ))]);
        records.push(TrainingRecord::new(
            Task::AlignS2type,
            prompt.sequence,
            completion,
            vocabulary,
            combined_rendering(&prompt.rendering, &entry.item_type),
        )?);
    }
    Ok((records, skipped))
}

fn group_by_user(events: &[LogEvent]) -> BTreeMap<&str, Vec<&LogEvent>> {
    let mut per_user: BTreeMap<&str, Vec<&LogEvent>> = BTreeMap::new();
    for e in events {
        per_user.entry(&e.user_id).or_default().push(e);
    }
    per_user
}

fn history_items(
    events: &[&LogEvent],
    index: &SidIndex,
    limit: usize,
) -> Result<Vec<(String, SemanticId)>, SequenceError> {
    let start = events.len().saturating_sub(limit);
    events[start..]
        .iter()
        .map(|e| {
            index
                .get(&e.item_id)
                .map(|(t, codes)| (t.clone(), SemanticId::new(codes.clone())))
                .ok_or_else(|| SequenceError::UnregisteredItem {
                    item_id: e.item_id.clone(),
                })
        })
        .collect()
}

fn lookup<'a>(
    index: &'a SidIndex,
    item_id: &str,
) -> Result<(&'a String, SemanticId), SequenceError> {
    index
        .get(item_id)
        .map(|(t, codes)| (t, SemanticId::new(codes.clone())))
        .ok_or_else(|| SequenceError::UnregisteredItem {
            item_id: item_id.to_string(),
        })
}

/// Builds one instruction record per eligible user for the given task.
///
/// Eligibility: `recommend` needs two interactions and a non-empty gap-
/// respecting history; `retrieve` needs one interaction; `recsplain` needs
/// two interactions plus a rationale annotation; `profile` needs one
/// interaction plus a profile annotation.
pub fn build_instruction_records(
    events: &[LogEvent],
    task: Task,
    entries: &[CatalogEntry],
    index: &SidIndex,
    annotations: &Annotations,
    vocabulary: &Vocabulary,
    options: &DatagenOptions,
) -> Result<Vec<TrainingRecord>, SequenceError> {
    let by_id: BTreeMap<&str, &CatalogEntry> =
        entries.iter().map(|e| (e.item_id.as_str(), e)).collect();
    let mut records = Vec::new();

    for (user, user_events) in group_by_user(events) {
        let (country, language) = user_features(user);
        let seed = record_seed(options.template_seed, user);
        match task {
            Task::Recommend => {
                if user_events.len() < 2 {
                    continue;
                }
                let label = user_events[user_events.len() - 1];
                let cutoff = label.day.saturating_sub(options.gap_days);
                let context: Vec<&LogEvent> = user_events[..user_events.len() - 1]
                    .iter()
                    .copied()
                    .filter(|e| e.day <= cutoff)
                    .collect();
                if context.is_empty() {
                    continue;
                }
                let history = history_items(&context, index, options.history_limit)?;
                let (label_type, label_sid) = lookup(index, &label.item_id)?;
                let mut fields = Fields::new();
                fields.insert("history".into(), FieldValue::Items(history));
                fields.insert("country".into(), FieldValue::Text(country.into()));
                fields.insert("language".into(), FieldValue::Text(language.into()));
                fields.insert("target_type".into(), FieldValue::Text(label_type.clone()));
                let prompt = render_prompt(task, seed, &fields, vocabulary)?;
                let (completion, completion_rendering) = completion_item(label_type, &label_sid);
                records.push(TrainingRecord::new(
                    task,
                    prompt.sequence,
                    completion,
                    vocabulary,
                    combined_rendering(&prompt.rendering, &completion_rendering),
                )?);
            }
            Task::Retrieve => {
                let Some(label) = user_events.last() else { continue };
                let (label_type, label_sid) = lookup(index, &label.item_id)?;
                let Some(entry) = by_id.get(label.item_id.as_str()) else {
                    return Err(SequenceError::UnregisteredItem {
                        item_id: label.item_id.clone(),
                    });
                };
                let query = query_text(entry);
                if query.trim().is_empty() {
                    return Err(SequenceError::EmptyQuery {
                        item_id: label.item_id.clone(),
                    });
                }
                let mut fields = Fields::new();
                fields.insert("query".into(), FieldValue::Text(query));
                fields.insert("country".into(), FieldValue::Text(country.into()));
                fields.insert("target_type".into(), FieldValue::Text(label_type.clone()));
                let prompt = render_prompt(task, seed, &fields, vocabulary)?;
                let (completion, completion_rendering) = completion_item(label_type, &label_sid);
                records.push(TrainingRecord::new(
                    task,
                    prompt.sequence,
                    completion,
                    vocabulary,
                    combined_rendering(&prompt.rendering, &completion_rendering),
                )?);
            }
            Task::Recsplain => {
                if user_events.len() < 2 {
                    continue;
                }
                let Some(rationale) = annotations.rationales.get(user) else {
                    continue;
                };
                // seeded cut point: explain the item at cut given what came before
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let cut = rng.gen_range(1..user_events.len());
                let label = user_events[cut];
                let history = history_items(&user_events[..cut], index, options.history_limit)?;
                let (label_type, label_sid) = lookup(index, &label.item_id)?;
                let mut fields = Fields::new();
                fields.insert("history".into(), FieldValue::Items(history));
                fields.insert("target_type".into(), FieldValue::Text(label_type.clone()));
                let prompt = render_prompt(task, seed, &fields, vocabulary)?;
                let mut completion = MixedSequence::default();
                completion.push(Segment::ItemRef {
                    item_type: label_type.clone(),
                    sid: label_sid.clone(),
                });
                completion.push(Segment::Text(tokenize_text(rationale, vocabulary)));
                let rendering = combined_rendering(
                    &prompt.rendering,
                    &format!("{} {}", render_item_ref(label_type, &label_sid), rationale),
                );
                records.push(TrainingRecord::new(
                    task,
                    prompt.sequence,
                    completion,
                    vocabulary,
                    rendering,
                )?);
            }
            Task::Profile => {
                if user_events.is_empty() {
                    continue;
                }
                let Some(profile) = annotations.profiles.get(user) else {
                    continue;
                };
                let history = history_items(user_events.as_slice(), index, options.history_limit)?;
                let mut fields = Fields::new();
                fields.insert("history".into(), FieldValue::Items(history));
                let prompt = render_prompt(task, seed, &fields, vocabulary)?;
                let completion =
                    MixedSequence::new(vec![Segment::Text(tokenize_text(profile, vocabulary))]);
                records.push(TrainingRecord::new(
                    task,
                    prompt.sequence,
                    completion,
                    vocabulary,
                    combined_rendering(&prompt.rendering, profile),
                )?);
            }
            other => {
                return Err(SequenceError::UnknownTask {
                    label: format!("{other} is not an instruction task"),
                })
            }
        }
    }
    Ok(records)
}

/// Encodes a user's history as bare item spans, most recent `limit` items.
/// This is the prompt shape for next-item evaluation and the sequence shape
/// the reference scorer trains on.
pub fn eval_prompt_ids(
    context: &[LogEvent],
    index: &SidIndex,
    vocabulary: &Vocabulary,
    limit: usize,
) -> Result<Vec<usize>, SequenceError> {
    let refs: Vec<&LogEvent> = context.iter().collect();
    let items = history_items(&refs, index, limit)?;
    let mut seq = MixedSequence::default();
    for (item_type, sid) in items {
        seq.push(Segment::ItemRef { item_type, sid });
    }
    super::encode(&seq, vocabulary)
}

/// Per-user encoded histories over the training window, for scorer training.
pub fn scorer_corpus(
    train: &[LogEvent],
    index: &SidIndex,
    vocabulary: &Vocabulary,
) -> Result<Vec<Vec<usize>>, SequenceError> {
    let mut corpus = Vec::new();
    for (_, user_events) in group_by_user(train) {
        let mut seq = MixedSequence::default();
        for e in user_events {
            let (item_type, sid) = lookup(index, &e.item_id)?;
            seq.push(Segment::ItemRef {
                item_type: item_type.clone(),
                sid,
            });
        }
        corpus.push(super::encode(&seq, vocabulary)?);
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ItemTypeSpace;
    use crate::sequence::decode;

    fn vocab() -> Vocabulary {
        Vocabulary::build(64, &[ItemTypeSpace::new("ep", 4, 4, 2, 4).unwrap()]).unwrap()
    }

    fn entry(id: &str, codes: &[u32], title: &str, description: &str) -> CatalogEntry {
        CatalogEntry {
            item_id: id.to_string(),
            item_type: "ep".to_string(),
            sid: SemanticId::new(codes.to_vec()),
            popularity: 1.0,
            title: title.to_string(),
            description: description.to_string(),
            created_at: 0,
        }
    }

    fn index_of(entries: &[CatalogEntry]) -> SidIndex {
        entries
            .iter()
            .map(|e| {
                (
                    e.item_id.clone(),
                    (e.item_type.clone(), e.sid.codes().to_vec()),
                )
            })
            .collect()
    }

    fn event(user: &str, item: &str, day: u32) -> LogEvent {
        LogEvent {
            user_id: user.to_string(),
            item_id: item.to_string(),
            day,
        }
    }

    #[test]
    fn alignment_builds_three_records_per_item() {
        let v = vocab();
        let entries = vec![entry("e1", &[1, 2], "Morning news", "Daily headlines. More.")];
        let (records, skipped) =
            build_alignment_records(&entries, &v, &DatagenOptions::default()).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(skipped, 0);
        assert_eq!(records[0].task, Task::AlignS2t);
        assert_eq!(records[1].task, Task::AlignT2s);
        assert_eq!(records[2].task, Task::AlignS2type);

        // t2s completion decodes to exactly one matching item reference
        let ids = super::super::encode(&records[1].completion, &v).unwrap();
        let seq = decode(&ids, &v).unwrap();
        assert_eq!(seq.span_count(), 1);
        match &seq.segments()[0] {
            Segment::ItemRef { item_type, sid } => {
                assert_eq!(item_type, "ep");
                assert_eq!(sid.codes(), &[1, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }

        // s2type completion tokens equal the tokenized type label
        let expect = tokenize_text("ep", &v);
        match &records[2].completion.segments()[0] {
            Segment::Text(ids) => assert_eq!(ids, &expect),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn alignment_skips_empty_titles_with_count() {
        let v = vocab();
        let entries = vec![
            entry("e1", &[1, 2], "", "desc"),
            entry("e2", &[2, 2], "ok", "desc."),
        ];
        let (records, skipped) =
            build_alignment_records(&entries, &v, &DatagenOptions::default()).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn recommend_respects_temporal_gap() {
        let v = vocab();
        let entries = vec![
            entry("i1", &[0, 0], "one", "d."),
            entry("i2", &[1, 1], "two", "d."),
            entry("i3", &[2, 2], "three", "d."),
        ];
        let index = index_of(&entries);
        let events = vec![
            event("u1", "i1", 1),
            event("u1", "i2", 2),
            event("u1", "i3", 9),
        ];
        let options = DatagenOptions {
            gap_days: 7,
            ..DatagenOptions::default()
        };
        let records = build_instruction_records(
            &events,
            Task::Recommend,
            &entries,
            &index,
            &Annotations::default(),
            &v,
            &options,
        )
        .unwrap();
        assert_eq!(records.len(), 1);
        // prompt holds items i1, i2; completion holds i3
        assert_eq!(records[0].prompt.span_count(), 2);
        let ids = super::super::encode(&records[0].completion, &v).unwrap();
        let seq = decode(&ids, &v).unwrap();
        match &seq.segments()[0] {
            Segment::ItemRef { sid, .. } => assert_eq!(sid.codes(), &[2, 2]),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(records[0].loss_boundary,
            super::super::encode(&records[0].prompt, &v).unwrap().len());
    }

    #[test]
    fn recommend_skips_short_histories() {
        let v = vocab();
        let entries = vec![entry("i1", &[0, 0], "one", "d.")];
        let index = index_of(&entries);
        let events = vec![event("u1", "i1", 1)];
        let records = build_instruction_records(
            &events,
            Task::Recommend,
            &entries,
            &index,
            &Annotations::default(),
            &v,
            &DatagenOptions::default(),
        )
        .unwrap();
        assert!(records.is_empty());
    }

    #[test]
    fn retrieve_rejects_empty_query() {
        let v = vocab();
        let entries = vec![entry("i1", &[0, 0], "", "")];
        let index = index_of(&entries);
        let events = vec![event("u1", "i1", 1)];
        let err = build_instruction_records(
            &events,
            Task::Retrieve,
            &entries,
            &index,
            &Annotations::default(),
            &v,
            &DatagenOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, SequenceError::EmptyQuery { .. }));
    }

    #[test]
    fn recsplain_completion_is_item_then_text() {
        let v = vocab();
        let entries = vec![
            entry("i1", &[0, 0], "one", "d."),
            entry("i2", &[1, 1], "two", "d."),
        ];
        let index = index_of(&entries);
        let events = vec![event("u1", "i1", 1), event("u1", "i2", 2)];
        let mut annotations = Annotations::default();
        annotations
            .rationales
            .insert("u1".into(), "matches their taste".into());
        let records = build_instruction_records(
            &events,
            Task::Recsplain,
            &entries,
            &index,
            &annotations,
            &v,
            &DatagenOptions::default(),
        )
        .unwrap();
        assert_eq!(records.len(), 1);
        let segments = records[0].completion.segments();
        assert!(matches!(segments[0], Segment::ItemRef { .. }));
        match &segments[1] {
            Segment::Text(ids) => assert!(!ids.is_empty()),
            other => panic!("unexpected {other:?}"),
        }

        // no annotation -> no record
        let none = build_instruction_records(
            &events,
            Task::Recsplain,
            &entries,
            &index,
            &Annotations::default(),
            &v,
            &DatagenOptions::default(),
        )
        .unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn split_fixture_hand_trace() {
        let events = vec![
            event("u1", "i1", 1),
            event("u1", "i2", 2),
            event("u1", "i3", 9),
        ];
        let (train, pairs) = temporal_split(&events, 2, 7).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].context.len(), 2);
        assert_eq!(pairs[0].label.day, 9);
    }

    #[test]
    fn split_with_no_future_events_is_empty() {
        let events = vec![event("u1", "i1", 1), event("u2", "i2", 3)];
        let (train, pairs) = temporal_split(&events, 5, 2).unwrap();
        assert_eq!(train.len(), 2);
        assert!(pairs.is_empty());
    }

    #[test]
    fn split_never_leaks() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut events = Vec::new();
        for u in 0..30 {
            let mut day = 0u32;
            for i in 0..rng.gen_range(1..20) {
                day += rng.gen_range(0..4);
                events.push(event(&format!("u{u:02}"), &format!("i{i}"), day));
            }
        }
        let t = 10;
        let k = 5;
        let (train, pairs) = temporal_split(&events, t, k).unwrap();
        assert!(train.iter().all(|e| e.day <= t), "train leaked past t");
        for pair in &pairs {
            assert!(pair.context.iter().all(|e| e.day <= t));
            assert!(pair.label.day >= t + k);
            let max_context = pair.context.iter().map(|e| e.day).max().unwrap_or(0);
            assert!(max_context <= t && t < t + k && t + k <= pair.label.day);
        }
    }

    #[test]
    fn logs_round_trip_and_sort_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logs.tsv");
        let events = vec![
            event("u1", "a", 1),
            event("u1", "b", 3),
            event("u2", "a", 2),
        ];
        store_logs(&path, &events).unwrap();
        assert_eq!(load_logs(&path).unwrap(), events);

        fs::write(&path, "u2\ta\t5\nu1\tb\t1\n").unwrap();
        assert!(matches!(
            load_logs(&path),
            Err(SequenceError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn annotations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.tsv");
        let mut annotations = Annotations::default();
        annotations.rationales.insert("u1".into(), "line\nbreak".into());
        annotations.profiles.insert("u2".into(), "tab\there".into());
        fs::write(&path, annotations_to_string(&annotations)).unwrap();
        assert_eq!(load_annotations(&path).unwrap(), annotations);
    }

    #[test]
    fn scorer_corpus_and_eval_prompts_encode_histories() {
        let v = vocab();
        let entries = vec![
            entry("i1", &[0, 0], "one", "d."),
            entry("i2", &[1, 1], "two", "d."),
        ];
        let index = index_of(&entries);
        let events = vec![event("u1", "i1", 1), event("u1", "i2", 2)];
        let corpus = scorer_corpus(&events, &index, &v).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus[0].len(), 8); // two spans of 4 ids

        let prompt = eval_prompt_ids(&events, &index, &v, 1).unwrap();
        assert_eq!(prompt.len(), 4); // history limit 1 keeps the last span

        let missing = vec![event("u1", "ghost", 1)];
        assert!(matches!(
            scorer_corpus(&missing, &index, &v),
            Err(SequenceError::UnregisteredItem { .. })
        ));
    }
}
