use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use sidkit_cli::commands::{
    cmd_assign, cmd_build_codebooks, cmd_build_trie, cmd_datagen, cmd_eval, cmd_generate,
    cmd_stats, cmd_synth, GenerateArgs, SynthOverrides,
};
use sidkit_cli::config::PipelineConfig;

/// Semantic-ID pipeline: codebooks, registries, tries, datagen, decoding,
/// and evaluation. Log verbosity comes from the RUST_LOG environment
/// variable.
#[derive(Parser, Debug)]
#[command(name = "sidkit", version)]
struct Cli {
    /// Pipeline config file (TOML).
    #[arg(long, global = true, default_value = "sidkit.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus: embeddings, catalog, logs, annotations.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        events: Option<usize>,
    },
    /// Train one quantizer per item type and write the codebook files.
    BuildCodebooks,
    /// Assign SIDs to the catalog, resolve collisions, write the registry.
    Assign {
        /// Apply the atomic-id ablation: permute tuples across items.
        #[arg(long)]
        permute_seed: Option<u64>,
    },
    /// Build and validate the per-type prefix tries.
    BuildTrie,
    /// Emit alignment/instruction records, scorer corpus, and eval prompts.
    Datagen,
    /// Decode a prompt file into ranked results.
    Generate {
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Drop trie masking (ablation); reports the validity rate.
        #[arg(long)]
        unconstrained: bool,
        /// Sample instead of beam search.
        #[arg(long)]
        sample: bool,
        /// Beam width (default from config).
        #[arg(long, conflicts_with = "sample")]
        beam: Option<usize>,
        /// Steer every span to this item type.
        #[arg(long)]
        target_type: Option<String>,
        /// Restrict generation to the item ids listed in this file.
        #[arg(long)]
        subset: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a results file against labels: HR@K and NDCG@K.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Comma-separated cutoffs, e.g. 10,30.
        #[arg(long, default_value = "10,30")]
        k: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print artifact summaries for the current config.
    Stats,
}

fn parse_ks(text: &str) -> Result<Vec<usize>> {
    let mut ks = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        let k: usize = part
            .parse()
            .map_err(|_| anyhow::anyhow!("bad K value {part:?}: must be a positive integer"))?;
        if k == 0 {
            bail!("bad K value 0: must be a positive integer");
        }
        ks.push(k);
    }
    Ok(ks)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default()).init();
    let cli = Cli::parse();
    let config = PipelineConfig::load(&cli.config)?;
    match cli.command {
        Command::Synth {
            seed,
            items,
            users,
            events,
        } => cmd_synth(
            &config,
            &SynthOverrides {
                seed,
                items_per_type: items,
                users,
                events_per_user: events,
            },
        ),
        Command::BuildCodebooks => cmd_build_codebooks(&config),
        Command::Assign { permute_seed } => cmd_assign(&config, permute_seed),
        Command::BuildTrie => cmd_build_trie(&config),
        Command::Datagen => cmd_datagen(&config),
        Command::Generate {
            prompts,
            out,
            unconstrained,
            sample,
            beam,
            target_type,
            subset,
            seed,
        } => cmd_generate(
            &config,
            &GenerateArgs {
                prompts,
                out,
                unconstrained,
                sample,
                beam,
                target_type,
                subset,
                seed,
            },
        ),
        Command::Eval {
            results,
            labels,
            k,
            out,
        } => {
            let ks = parse_ks(&k)?;
            cmd_eval(&results, &labels, &ks, out.as_deref())?;
            Ok(())
        }
        Command::Stats => cmd_stats(&config),
    }
}
