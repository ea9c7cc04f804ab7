//! Shared pipeline glue between the subcommands: artifact loading, the
//! vocabulary for a config, scorer construction, and the next-item
//! evaluation loop.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use sidkit::catalog::{CatalogEntry, CatalogRow, Vocabulary};
use sidkit::decoder::{constrained_beam_search, SidTrie};
use sidkit::embedding::ItemTypeSpace;
use sidkit::eval::EvalRecord;
use sidkit::quantizer::SemanticId;
use sidkit::scorer::{train_trigram, Scorer, TransparentContext, TrigramTable};
use sidkit::sequence::{eval_prompt_ids, EvalPair, LogEvent, SidIndex};

use crate::config::PipelineConfig;

/// Writes a file atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))?;
    Ok(())
}

/// Item-type spaces in config order; source_dim comes from the config target
/// (the vocabulary only needs M and K).
pub fn spaces_of(config: &PipelineConfig) -> Result<Vec<ItemTypeSpace>> {
    config
        .item_types
        .iter()
        .map(|t| {
            ItemTypeSpace::new(&t.name, t.target_dim, t.target_dim, t.m, t.k)
                .map_err(|e| anyhow!("type {:?}: {e}", t.name))
        })
        .collect()
}

pub fn vocabulary_of(config: &PipelineConfig) -> Result<Vocabulary> {
    let spaces = spaces_of(config)?;
    Ok(Vocabulary::build(config.vocab.text_tokens, &spaces)?)
}

/// Joins catalog rows with the registry's item -> tuple index into full
/// entries. Every catalog item must be registered.
pub fn entries_from_registry(
    rows: Vec<CatalogRow>,
    index: &SidIndex,
) -> Result<Vec<CatalogEntry>> {
    rows.into_iter()
        .map(|row| {
            let (item_type, codes) = index
                .get(&row.item_id)
                .ok_or_else(|| anyhow!("catalog item {:?} is not in the registry", row.item_id))?;
            if item_type != &row.item_type {
                bail!(
                    "item {:?} is typed {:?} in the catalog but {:?} in the registry",
                    row.item_id,
                    row.item_type,
                    item_type
                );
            }
            Ok(CatalogEntry::from_row(row, SemanticId::new(codes.clone())))
        })
        .collect()
}

/// The scorer behind generation: a trigram over encoded histories with the
/// span delimiters transparent in its context, or a uniform fallback.
pub enum PipelineScorer {
    Trigram(TransparentContext<TrigramTable>),
    Uniform(sidkit::scorer::UniformScorer),
}

impl Scorer for PipelineScorer {
    fn vocab_size(&self) -> usize {
        match self {
            PipelineScorer::Trigram(s) => s.vocab_size(),
            PipelineScorer::Uniform(s) => s.vocab_size(),
        }
    }

    fn next_scores(&self, context: &[usize]) -> Vec<f64> {
        match self {
            PipelineScorer::Trigram(s) => s.next_scores(context),
            PipelineScorer::Uniform(s) => s.next_scores(context),
        }
    }
}

pub fn trigram_scorer(
    corpus: &[Vec<usize>],
    alpha: f64,
    vocabulary: &Vocabulary,
) -> Result<PipelineScorer> {
    let table = train_trigram(corpus, alpha, vocabulary.total_size())?;
    Ok(PipelineScorer::Trigram(TransparentContext::new(
        table,
        [vocabulary.sid_open(), vocabulary.sid_close()],
    )))
}

pub fn uniform_pipeline_scorer(vocabulary: &Vocabulary) -> Result<PipelineScorer> {
    Ok(PipelineScorer::Uniform(sidkit::scorer::uniform_scorer(
        vocabulary.total_size(),
    )?))
}

/// Scorer-corpus file: one history per line, token ids space-separated.
pub fn corpus_to_string(corpus: &[Vec<usize>]) -> String {
    let mut out = String::new();
    for seq in corpus {
        let words: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    out
}

pub fn load_corpus(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading corpus {}", path.display()))?;
    let mut corpus = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            corpus.push(Vec::new());
            continue;
        }
        let seq: Result<Vec<usize>, _> = line.split(' ').map(str::parse).collect();
        corpus.push(seq.map_err(|e| anyhow!("{}:{}: {e}", path.display(), i + 1))?);
    }
    Ok(corpus)
}

/// One evaluation prompt: the user's encoded history and the label's type.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptLine {
    pub user_id: String,
    pub target_type: String,
    pub prompt_ids: Vec<usize>,
}

pub fn prompts_to_string(prompts: &[PromptLine]) -> String {
    let mut out = String::new();
    for p in prompts {
        out.push_str(&serde_json::to_string(p).expect("prompt serializes"));
        out.push('\n');
    }
    out
}

pub fn load_prompts(path: &Path) -> Result<Vec<PromptLine>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading prompts {}", path.display()))?;
    let mut prompts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        prompts.push(
            serde_json::from_str(line)
                .map_err(|e| anyhow!("{}:{}: {e}", path.display(), i + 1))?,
        );
    }
    Ok(prompts)
}

/// Builds eval prompts and the parallel labels file content from the
/// temporal split's eval pairs.
pub fn eval_prompts(
    pairs: &[EvalPair],
    index: &SidIndex,
    vocabulary: &Vocabulary,
    history_limit: usize,
) -> Result<(Vec<PromptLine>, String)> {
    let mut prompts = Vec::with_capacity(pairs.len());
    let mut labels = String::new();
    for pair in pairs {
        let (target_type, _) = index
            .get(&pair.label.item_id)
            .ok_or_else(|| anyhow!("label item {:?} not in registry", pair.label.item_id))?;
        let prompt_ids = eval_prompt_ids(&pair.context, index, vocabulary, history_limit)?;
        prompts.push(PromptLine {
            user_id: pair.user_id.clone(),
            target_type: target_type.clone(),
            prompt_ids,
        });
        labels.push_str(&format!("{}\t{}\n", pair.user_id, pair.label.item_id));
    }
    Ok((prompts, labels))
}

/// Runs constrained beam search over every prompt and returns one ranked
/// record per prompt.
pub fn next_item_eval<S: Scorer>(
    prompts: &[PromptLine],
    labels: &BTreeMap<String, String>,
    scorer: &S,
    tries: &BTreeMap<String, SidTrie>,
    vocabulary: &Vocabulary,
    beam_width: usize,
) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let result = constrained_beam_search(
            scorer,
            &prompt.prompt_ids,
            tries,
            vocabulary,
            beam_width,
            Some(&prompt.target_type),
            None,
        )?;
        let ranked: Vec<String> = result.items.into_iter().map(|i| i.item_id).collect();
        let label = labels
            .get(&prompt.user_id)
            .ok_or_else(|| anyhow!("no label for user {:?}", prompt.user_id))?;
        records.push(EvalRecord::new(prompt.user_id.clone(), ranked, label)?);
    }
    Ok(records)
}

/// Popularity baseline: items ranked by training consumption count per item
/// type (ties to the lexicographically smaller id), the same list for every
/// user of that type.
pub fn popularity_records(
    train: &[LogEvent],
    prompts: &[PromptLine],
    labels: &BTreeMap<String, String>,
    index: &SidIndex,
    width: usize,
) -> Result<Vec<EvalRecord>> {
    let mut counts: BTreeMap<&str, BTreeMap<&str, u64>> = BTreeMap::new();
    for event in train {
        let (item_type, _) = index
            .get(&event.item_id)
            .ok_or_else(|| anyhow!("train item {:?} not in registry", event.item_id))?;
        *counts
            .entry(item_type)
            .or_default()
            .entry(&event.item_id)
            .or_insert(0) += 1;
    }
    let mut top: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (item_type, per_item) in &counts {
        let mut ranked: Vec<(&str, u64)> = per_item.iter().map(|(id, &c)| (*id, c)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        top.insert(
            item_type,
            ranked
                .into_iter()
                .take(width)
                .map(|(id, _)| id.to_string())
                .collect(),
        );
    }
    let mut records = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let ranked = top
            .get(prompt.target_type.as_str())
            .cloned()
            .unwrap_or_default();
        let label = labels
            .get(&prompt.user_id)
            .ok_or_else(|| anyhow!("no label for user {:?}", prompt.user_id))?;
        records.push(EvalRecord::new(prompt.user_id.clone(), ranked, label)?);
    }
    Ok(records)
}

/// Results file: `user_id TAB rank TAB item_id TAB score`, ranks 1-based.
pub fn results_to_string(results: &[(String, Vec<(String, f64)>)]) -> String {
    let mut out = String::new();
    for (user, ranked) in results {
        for (rank, (item, score)) in ranked.iter().enumerate() {
            out.push_str(&format!("{user}\t{}\t{item}\t{score:.9}\n", rank + 1));
        }
    }
    out
}

pub fn load_results(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading results {}", path.display()))?;
    let mut per_user: BTreeMap<String, Vec<(usize, String)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            bail!(
                "{}:{}: expected 4 tab-separated fields, got {}",
                path.display(),
                i + 1,
                fields.len()
            );
        }
        let rank: usize = fields[1]
            .parse()
            .map_err(|_| anyhow!("{}:{}: bad rank {:?}", path.display(), i + 1, fields[1]))?;
        per_user
            .entry(fields[0].to_string())
            .or_default()
            .push((rank, fields[2].to_string()));
    }
    Ok(per_user
        .into_iter()
        .map(|(user, mut ranked)| {
            ranked.sort();
            (user, ranked.into_iter().map(|(_, item)| item).collect())
        })
        .collect())
}

pub fn load_labels(path: &Path) -> Result<BTreeMap<String, String>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading labels {}", path.display()))?;
    let mut labels = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            bail!(
                "{}:{}: expected `user TAB item`, got {:?}",
                path.display(),
                i + 1,
                line
            );
        }
        labels.insert(fields[0].to_string(), fields[1].to_string());
    }
    if labels.is_empty() {
        bail!("{}: labels file is empty", path.display());
    }
    Ok(labels)
}
