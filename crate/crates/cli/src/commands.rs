//! Subcommand implementations. Every command is deterministic given the
//! config and seeds; reruns produce byte-identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;

use sidkit::catalog::{
    catalog_to_string, load_catalog, load_registry, permute_sids, registry_to_string,
    resolve_collisions, vocab_extension_size, CollisionPolicy,
};
use sidkit::decoder::{build_tries, sample_top_p, unconstrained_generate, GenMode};
use sidkit::embedding::{load_embeddings, store_embeddings, truncate_and_normalize, EmbeddingMatrix};
use sidkit::eval::{hit_rate_at_k, ndcg_at_k, report_line, valid_sid_rate, EvalRecord};
use sidkit::quantizer::{
    assign_all, assign_lsh_sid, load_codebook, load_lsh, stage_mean_squared_residuals,
    store_codebook, store_lsh, sweep_configs, train_lsh, train_residual_kmeans, SemanticId,
    TrainConfig,
};
use sidkit::sequence::{
    annotations_to_string, build_alignment_records, build_instruction_records, decode,
    load_annotations, load_logs, logs_to_string, records_to_string, scorer_corpus,
    temporal_split, Annotations, DatagenOptions, Segment, SidIndex, Task,
};
use sidkit::synth::{generate as synth_generate, SynthParams};

use crate::config::{PipelineConfig, PolicyKind, QuantizerKind, ScorerKind};
use crate::pipeline::{
    atomic_write, corpus_to_string, entries_from_registry, eval_prompts, load_corpus, load_labels,
    load_prompts, load_results, prompts_to_string, results_to_string,
    spaces_of, trigram_scorer, uniform_pipeline_scorer, vocabulary_of, PipelineScorer,
};

fn ensure_workdir(config: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(&config.paths.workdir).with_context(|| {
        format!("creating workdir {}", config.paths.workdir.display())
    })
}

/// `synth`: writes embeddings, catalog, logs, and annotations for a seeded
/// synthetic corpus shaped by the config.
pub struct SynthOverrides {
    pub seed: Option<u64>,
    pub items_per_type: Option<usize>,
    pub users: Option<usize>,
    pub events_per_user: Option<usize>,
}

pub fn cmd_synth(config: &PipelineConfig, overrides: &SynthOverrides) -> Result<()> {
    ensure_workdir(config)?;
    let params = SynthParams {
        seed: overrides.seed.unwrap_or(config.seed),
        item_types: config.item_types.iter().map(|t| t.name.clone()).collect(),
        items_per_type: overrides.items_per_type.unwrap_or(config.synth.items_per_type),
        users: overrides.users.unwrap_or(config.synth.users),
        events_per_user: overrides
            .events_per_user
            .unwrap_or(config.synth.events_per_user),
        clusters: config.synth.clusters,
        affinity: config.synth.affinity,
        dim: config.synth.dim,
        days: config.synth.days,
        separation: config.synth.separation,
    };
    let corpus = synth_generate(&params)?;

    for (type_config, matrix) in config.item_types.iter().zip(&corpus.embeddings) {
        if let Some(parent) = type_config.embeddings.parent() {
            fs::create_dir_all(parent)?;
        }
        store_matrix_atomic(&type_config.embeddings, matrix)?;
        info!(
            "wrote {} ({} x {})",
            type_config.embeddings.display(),
            matrix.count(),
            matrix.dim()
        );
    }
    atomic_write(
        &config.paths.catalog,
        catalog_to_string(&corpus.catalog).as_bytes(),
    )?;
    atomic_write(&config.paths.logs, logs_to_string(&corpus.logs).as_bytes())?;
    if let Some(annotations_path) = &config.paths.annotations {
        atomic_write(
            annotations_path,
            annotations_to_string(&corpus.annotations).as_bytes(),
        )?;
    }
    println!(
        "synth: {} items x {} types, {} users, {} events",
        params.items_per_type,
        params.item_types.len(),
        params.users,
        corpus.logs.len()
    );
    Ok(())
}

fn store_matrix_atomic(path: &Path, matrix: &EmbeddingMatrix) -> Result<()> {
    let tmp: PathBuf = {
        let mut s = path.as_os_str().to_owned();
        s.push(".tmp");
        s.into()
    };
    store_embeddings(&tmp, matrix)?;
    let tmp_ids: PathBuf = {
        let mut s = tmp.as_os_str().to_owned();
        s.push(".ids");
        s.into()
    };
    let ids: PathBuf = {
        let mut s = path.as_os_str().to_owned();
        s.push(".ids");
        s.into()
    };
    fs::rename(&tmp, path)?;
    fs::rename(&tmp_ids, &ids)?;
    Ok(())
}

fn load_truncated(config: &PipelineConfig, type_name: &str) -> Result<EmbeddingMatrix> {
    let type_config = config
        .item_types
        .iter()
        .find(|t| t.name == type_name)
        .ok_or_else(|| anyhow!("unknown item type {type_name:?}"))?;
    let matrix = load_embeddings(&type_config.embeddings, type_name)?;
    Ok(truncate_and_normalize(&matrix, type_config.target_dim)?)
}

/// `build-codebooks`: trains one quantizer per type and prints diagnostics,
/// including a sweep table when candidates are configured.
pub fn cmd_build_codebooks(config: &PipelineConfig) -> Result<()> {
    ensure_workdir(config)?;
    for type_config in &config.item_types {
        let matrix = load_truncated(config, &type_config.name)?;
        let train_config = TrainConfig {
            seed: type_config.seed,
            ..TrainConfig::default()
        };
        match type_config.quantizer {
            QuantizerKind::Rkmeans => {
                let codebook =
                    train_residual_kmeans(&matrix, type_config.m, type_config.k, train_config)?;
                let path = config.codebook_path(&type_config.name);
                store_codebook_atomic(&path, &codebook)?;
                let msr = stage_mean_squared_residuals(&codebook, &matrix)?;
                let stages: Vec<String> = msr.iter().map(|v| format!("{v:.6}")).collect();
                println!(
                    "{}: codebook M={} K={} dim={} -> {} (per-stage msr {})",
                    type_config.name,
                    type_config.m,
                    type_config.k,
                    matrix.dim(),
                    path.display(),
                    stages.join(" ")
                );
            }
            QuantizerKind::Lsh => {
                let bits = type_config.m * type_config.k.trailing_zeros() as usize;
                let planes = train_lsh(&type_config.name, matrix.dim(), bits, type_config.seed)?;
                let path = config.lsh_path(&type_config.name);
                let mut bytes = Vec::new();
                {
                    // serialize via the library writer into a temp, then move
                    let tmp = path.with_extension("sidl.tmp");
                    store_lsh(&tmp, &planes)?;
                    bytes.extend(fs::read(&tmp)?);
                    fs::remove_file(&tmp)?;
                }
                atomic_write(&path, &bytes)?;
                println!(
                    "{}: lsh planes bits={} dim={} -> {}",
                    type_config.name,
                    bits,
                    matrix.dim(),
                    path.display()
                );
            }
        }
        if !type_config.sweep.is_empty() {
            let rows = sweep_configs(&matrix, &type_config.sweep, train_config)?;
            println!("{}: sweep (M K collision_rate coherence@1..)", type_config.name);
            for row in rows {
                let coherence: Vec<String> = row
                    .prefix_coherence
                    .iter()
                    .map(|c| match c {
                        Some(v) => format!("{v:.4}"),
                        None => "-".to_string(),
                    })
                    .collect();
                println!(
                    "  {} {} {:.4} {}",
                    row.m,
                    row.k,
                    row.collision_rate,
                    coherence.join(" ")
                );
            }
        }
    }
    Ok(())
}

fn store_codebook_atomic(path: &Path, codebook: &sidkit::quantizer::Codebook) -> Result<()> {
    let tmp = path.with_extension("sidc.tmp");
    store_codebook(&tmp, codebook)?;
    let bytes = fs::read(&tmp)?;
    fs::remove_file(&tmp)?;
    atomic_write(path, &bytes)?;
    Ok(())
}

fn assign_type_sids(
    config: &PipelineConfig,
    type_name: &str,
) -> Result<BTreeMap<String, SemanticId>> {
    let type_config = config
        .item_types
        .iter()
        .find(|t| t.name == type_name)
        .expect("caller checked");
    let matrix = load_truncated(config, type_name)?;
    let sids = match type_config.quantizer {
        QuantizerKind::Rkmeans => {
            let codebook = load_codebook(&config.codebook_path(type_name))?;
            assign_all(&codebook, &matrix)?
        }
        QuantizerKind::Lsh => {
            let planes = load_lsh(&config.lsh_path(type_name))?;
            matrix
                .rows()
                .map(|row| assign_lsh_sid(&planes, row, type_config.m, type_config.k))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    Ok(matrix
        .item_ids()
        .iter()
        .cloned()
        .zip(sids)
        .collect())
}

/// `assign`: assigns SIDs to every catalog item, resolves collisions, and
/// writes the registry. `--permute-seed` applies the atomic-id ablation.
pub fn cmd_assign(config: &PipelineConfig, permute_seed: Option<u64>) -> Result<()> {
    ensure_workdir(config)?;
    let rows = load_catalog(&config.paths.catalog)?;
    let mut per_type: BTreeMap<&str, BTreeMap<String, SemanticId>> = BTreeMap::new();
    for type_config in &config.item_types {
        per_type.insert(
            &type_config.name,
            assign_type_sids(config, &type_config.name)?,
        );
    }
    let mut entries = Vec::with_capacity(rows.len());
    for row in rows {
        let sids = per_type.get(row.item_type.as_str()).ok_or_else(|| {
            anyhow!(
                "catalog item {:?} has undeclared type {:?}",
                row.item_id,
                row.item_type
            )
        })?;
        let sid = sids.get(&row.item_id).ok_or_else(|| {
            anyhow!(
                "catalog item {:?} has no embedding in type {:?}",
                row.item_id,
                row.item_type
            )
        })?;
        entries.push(sidkit::catalog::CatalogEntry::from_row(row, sid.clone()));
    }
    let policy = match config.collisions.policy {
        PolicyKind::Popularity => CollisionPolicy::Popularity,
        PolicyKind::Random => CollisionPolicy::Random {
            seed: config.collisions.seed,
        },
    };
    let mut registry = resolve_collisions(&entries, policy);
    if let Some(seed) = permute_seed {
        registry = permute_sids(&registry, seed)?;
        info!("applied atomic-id permutation with seed {seed}");
    }
    atomic_write(
        &config.registry_path(),
        registry_to_string(&registry).as_bytes(),
    )?;
    println!(
        "assign: {} items -> {} tuples ({})",
        registry.item_count(),
        registry.tuple_count(),
        config.registry_path().display()
    );
    Ok(())
}

/// `build-trie`: builds the per-type tries and prints their shape; a dry
/// validation of the registry the decoder will use.
pub fn cmd_build_trie(config: &PipelineConfig) -> Result<()> {
    let registry = load_registry(&config.registry_path())?;
    let tries = build_tries(&registry)?;
    for (item_type, trie) in &tries {
        let tuples = registry.tuples(item_type).map(|t| t.len()).unwrap_or(0);
        if trie.leaf_count() != tuples {
            bail!(
                "trie for {item_type} has {} leaves but the registry holds {} tuples",
                trie.leaf_count(),
                tuples
            );
        }
        println!(
            "{item_type}: tuple_len={} tuples={} nodes={}",
            trie.tuple_len(),
            tuples,
            trie.node_count()
        );
    }
    Ok(())
}

/// `datagen`: alignment + instruction record files, the scorer corpus, and
/// the eval prompt/label files from the temporal split.
pub fn cmd_datagen(config: &PipelineConfig) -> Result<()> {
    ensure_workdir(config)?;
    let vocabulary = vocabulary_of(config)?;
    let registry = load_registry(&config.registry_path())?;
    let index: SidIndex = registry.item_tuple_index();
    let rows = load_catalog(&config.paths.catalog)?;
    let entries = entries_from_registry(rows, &index)?;
    let events = load_logs(&config.paths.logs)?;
    let annotations = match &config.paths.annotations {
        Some(path) if path.exists() => load_annotations(path)?,
        _ => Annotations::default(),
    };
    let options = DatagenOptions {
        history_limit: config.datagen.history_limit,
        template_seed: config.datagen.template_seed,
        gap_days: config.datagen.gap_days,
    };

    let (train, pairs) = temporal_split(&events, config.datagen.split_day, config.datagen.gap_days)?;
    println!(
        "datagen: {} events -> {} train, {} eval pairs (t={}, k={})",
        events.len(),
        train.len(),
        pairs.len(),
        config.datagen.split_day,
        config.datagen.gap_days
    );

    let (alignment, skipped) = build_alignment_records(&entries, &vocabulary, &options)?;
    atomic_write(
        &config.records_path("alignment"),
        records_to_string(&alignment, &vocabulary)?.as_bytes(),
    )?;
    println!(
        "  alignment: {} records ({} empty-title items skipped)",
        alignment.len(),
        skipped
    );

    for task in [Task::Recommend, Task::Retrieve, Task::Recsplain, Task::Profile] {
        let records = build_instruction_records(
            &train,
            task,
            &entries,
            &index,
            &annotations,
            &vocabulary,
            &options,
        )?;
        atomic_write(
            &config.records_path(task.label()),
            records_to_string(&records, &vocabulary)?.as_bytes(),
        )?;
        println!("  {}: {} records", task.label(), records.len());
    }

    let corpus = scorer_corpus(&train, &index, &vocabulary)?;
    atomic_write(
        &config.scorer_corpus_path(),
        corpus_to_string(&corpus).as_bytes(),
    )?;

    let (prompts, labels) = eval_prompts(&pairs, &index, &vocabulary, options.history_limit)?;
    atomic_write(
        &config.eval_prompts_path(),
        prompts_to_string(&prompts).as_bytes(),
    )?;
    atomic_write(&config.eval_labels_path(), labels.as_bytes())?;
    println!("  eval: {} prompts", prompts.len());
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub prompts: PathBuf,
    pub out: Option<PathBuf>,
    pub unconstrained: bool,
    pub sample: bool,
    pub beam: Option<usize>,
    pub target_type: Option<String>,
    pub subset: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn build_scorer(config: &PipelineConfig, vocabulary: &sidkit::catalog::Vocabulary) -> Result<PipelineScorer> {
    match config.scorer.kind {
        ScorerKind::Trigram => {
            let corpus = load_corpus(&config.scorer_corpus_path())?;
            trigram_scorer(&corpus, config.scorer.alpha, vocabulary)
        }
        ScorerKind::Uniform => uniform_pipeline_scorer(vocabulary),
    }
}

/// `generate`: constrained (default) or unconstrained decoding over a prompt
/// file, beam search or sampling, with optional type steering and item
/// subsets. Writes ranked results.
pub fn cmd_generate(config: &PipelineConfig, args: &GenerateArgs) -> Result<()> {
    let vocabulary = vocabulary_of(config)?;
    let registry = load_registry(&config.registry_path())?;
    let tries = build_tries(&registry)?;
    let scorer = build_scorer(config, &vocabulary)?;
    let prompts = load_prompts(&args.prompts)?;
    let subset: Option<BTreeSet<String>> = match &args.subset {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading subset {}", path.display()))?;
            Some(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
        }
        None => None,
    };
    let seed = args.seed.unwrap_or(config.seed);
    let beam_width = args.beam.unwrap_or(config.decode.beam_width);

    let mut results: Vec<(String, Vec<(String, f64)>)> = Vec::new();
    let mut outputs: Vec<Vec<usize>> = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let target = args
            .target_type
            .as_deref()
            .unwrap_or(prompt.target_type.as_str());
        if args.unconstrained {
            let mode = if args.sample {
                GenMode::TopP {
                    temperature: config.decode.temperature,
                    top_k: config.decode.top_k,
                    top_p: config.decode.top_p,
                    seed: seed.wrapping_add(i as u64),
                    max_len: config.decode.max_len,
                }
            } else {
                GenMode::Greedy {
                    max_len: config.decode.max_len,
                }
            };
            let (ids, _valid) =
                unconstrained_generate(&scorer, &prompt.prompt_ids, &vocabulary, &registry, mode)?;
            let ranked = spans_to_items(&ids, &registry, &vocabulary);
            outputs.push(ids);
            results.push((prompt.user_id.clone(), ranked));
        } else if args.sample {
            let ids = sample_top_p(
                &scorer,
                &prompt.prompt_ids,
                &tries,
                &vocabulary,
                Some(target),
                config.decode.temperature,
                config.decode.top_k,
                config.decode.top_p,
                seed.wrapping_add(i as u64),
                config.decode.max_len,
            )?;
            let ranked = spans_to_items(&ids, &registry, &vocabulary);
            outputs.push(ids);
            results.push((prompt.user_id.clone(), ranked));
        } else {
            let result = sidkit::decoder::constrained_beam_search(
                &scorer,
                &prompt.prompt_ids,
                &tries,
                &vocabulary,
                beam_width,
                Some(target),
                subset.as_ref(),
            )?;
            outputs.push(result.sequences.first().cloned().unwrap_or_default());
            results.push((
                prompt.user_id.clone(),
                result
                    .items
                    .into_iter()
                    .map(|item| (item.item_id, item.score))
                    .collect(),
            ));
        }
    }
    if !outputs.is_empty() {
        let rate = valid_sid_rate(&outputs, &registry, &vocabulary)?;
        println!("valid_sid_rate\t{rate:.6}\t{}", outputs.len());
    }
    let out = args.out.clone().unwrap_or_else(|| config.results_path());
    ensure_workdir(config)?;
    atomic_write(&out, results_to_string(&results).as_bytes())?;
    println!("generate: {} prompts -> {}", prompts.len(), out.display());
    Ok(())
}

/// Resolves the spans of a generated sequence to canonical items, in
/// emission order, deduplicated. Unresolvable or malformed output yields
/// whatever prefix parses.
fn spans_to_items(
    ids: &[usize],
    registry: &sidkit::catalog::SidRegistry,
    vocabulary: &sidkit::catalog::Vocabulary,
) -> Vec<(String, f64)> {
    let Ok(seq) = decode(ids, vocabulary) else {
        return Vec::new();
    };
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for segment in seq.segments() {
        if let Segment::ItemRef { item_type, sid } = segment {
            if let Some(entry) = registry.resolve(item_type, sid.codes()) {
                if seen.insert(entry.canonical.clone()) {
                    out.push((entry.canonical.clone(), 0.0));
                }
            }
        }
    }
    out
}

/// `eval`: HR@K and NDCG@K over a results file against a labels file.
pub fn cmd_eval(
    results_path: &Path,
    labels_path: &Path,
    ks: &[usize],
    out: Option<&Path>,
) -> Result<String> {
    if ks.is_empty() {
        bail!("at least one K required");
    }
    let ranked = load_results(results_path)?;
    let labels = load_labels(labels_path)?;
    let mut records = Vec::new();
    for (user, label) in &labels {
        let ranked_items = ranked.get(user).cloned().unwrap_or_default();
        records.push(EvalRecord::new(user.clone(), ranked_items, label.clone())?);
    }
    let mut report = String::new();
    for &k in ks {
        let hr = hit_rate_at_k(&records, k)?;
        report.push_str(&report_line("hr", k, hr, records.len()));
        report.push('\n');
    }
    for &k in ks {
        let ndcg = ndcg_at_k(&records, k)?;
        report.push_str(&report_line("ndcg", k, ndcg, records.len()));
        report.push('\n');
    }
    print!("{report}");
    if let Some(out) = out {
        atomic_write(out, report.as_bytes())?;
    }
    Ok(report)
}

/// `stats`: one-line summaries of whatever artifacts exist.
pub fn cmd_stats(config: &PipelineConfig) -> Result<()> {
    let spaces = spaces_of(config)?;
    println!(
        "vocab: {} text tokens + {} extension ids",
        config.vocab.text_tokens,
        vocab_extension_size(&spaces)
    );
    for type_config in &config.item_types {
        if type_config.embeddings.exists() {
            let matrix = load_embeddings(&type_config.embeddings, &type_config.name)?;
            println!(
                "{}: embeddings {} x {} ({})",
                type_config.name,
                matrix.count(),
                matrix.dim(),
                type_config.embeddings.display()
            );
            let codebook_path = config.codebook_path(&type_config.name);
            if codebook_path.exists() {
                let codebook = load_codebook(&codebook_path)?;
                let truncated = truncate_and_normalize(&matrix, type_config.target_dim)?;
                let msr = stage_mean_squared_residuals(&codebook, &truncated)?;
                let stages: Vec<String> = msr.iter().map(|v| format!("{v:.6}")).collect();
                println!(
                    "{}: codebook M={} K={} per-stage msr {}",
                    type_config.name,
                    codebook.stages(),
                    codebook.codes_per_stage(),
                    stages.join(" ")
                );
            }
        }
    }
    if config.paths.catalog.exists() {
        let rows = load_catalog(&config.paths.catalog)?;
        println!("catalog: {} items ({})", rows.len(), config.paths.catalog.display());
    }
    if config.registry_path().exists() {
        let registry = load_registry(&config.registry_path())?;
        println!(
            "registry: {} tuples covering {} items",
            registry.tuple_count(),
            registry.item_count()
        );
        for item_type in registry.item_types().collect::<Vec<_>>() {
            let tuples = registry.tuples(item_type).unwrap();
            let items: usize = tuples.values().map(|e| e.colliders.len()).sum();
            let colliding: usize = tuples
                .values()
                .filter(|e| e.colliders.len() >= 2)
                .map(|e| e.colliders.len())
                .sum();
            println!(
                "  {item_type}: {} tuples, {} items, collision rate {:.4}",
                tuples.len(),
                items,
                colliding as f64 / items.max(1) as f64
            );
        }
        let tries = build_tries(&registry)?;
        for (item_type, trie) in &tries {
            println!(
                "  {item_type}: trie nodes={} leaves={}",
                trie.node_count(),
                trie.leaf_count()
            );
        }
    }
    if config.paths.logs.exists() {
        let events = load_logs(&config.paths.logs)?;
        let users: BTreeSet<&str> = events.iter().map(|e| e.user_id.as_str()).collect();
        println!("logs: {} events from {} users", events.len(), users.len());
    }
    Ok(())
}
