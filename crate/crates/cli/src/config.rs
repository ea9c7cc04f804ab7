//! Pipeline configuration: a single versioned TOML file. Command-line flags
//! override individual values.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    pub vocab: VocabConfig,
    #[serde(rename = "types")]
    pub item_types: Vec<TypeConfig>,
    #[serde(default)]
    pub collisions: CollisionConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub scorer: ScorerConfig,
    #[serde(default)]
    pub datagen: DatagenConfig,
    #[serde(default)]
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory for derived artifacts (codebooks, registry, records).
    pub workdir: PathBuf,
    pub catalog: PathBuf,
    pub logs: PathBuf,
    #[serde(default)]
    pub annotations: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    pub text_tokens: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeConfig {
    pub name: String,
    pub embeddings: PathBuf,
    pub m: usize,
    pub k: usize,
    pub target_dim: usize,
    #[serde(default = "default_quantizer")]
    pub quantizer: QuantizerKind,
    #[serde(default)]
    pub seed: u64,
    /// Optional (M, K) candidates for the diagnostics sweep.
    #[serde(default)]
    pub sweep: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantizerKind {
    Rkmeans,
    Lsh,
}

fn default_quantizer() -> QuantizerKind {
    QuantizerKind::Rkmeans
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollisionConfig {
    #[serde(default = "default_policy")]
    pub policy: PolicyKind,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Popularity,
    Random,
}

fn default_policy() -> PolicyKind {
    PolicyKind::Popularity
}

impl Default for CollisionConfig {
    fn default() -> Self {
        Self {
            policy: PolicyKind::Popularity,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    #[serde(default = "default_beam_width")]
    pub beam_width: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_beam_width() -> usize {
    30
}
fn default_temperature() -> f64 {
    0.6
}
fn default_top_k() -> usize {
    20
}
fn default_top_p() -> f64 {
    0.95
}
fn default_max_len() -> usize {
    64
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: default_beam_width(),
            temperature: default_temperature(),
            top_k: default_top_k(),
            top_p: default_top_p(),
            max_len: default_max_len(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerConfig {
    #[serde(default = "default_scorer_kind")]
    pub kind: ScorerKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Trigram,
    Uniform,
}

fn default_scorer_kind() -> ScorerKind {
    ScorerKind::Trigram
}
fn default_alpha() -> f64 {
    0.01
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            kind: ScorerKind::Trigram,
            alpha: default_alpha(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenConfig {
    #[serde(default = "default_history_limit")]
    pub history_limit: usize,
    #[serde(default = "default_split_day")]
    pub split_day: u32,
    #[serde(default = "default_gap_days")]
    pub gap_days: u32,
    #[serde(default)]
    pub template_seed: u64,
}

fn default_history_limit() -> usize {
    50
}
fn default_split_day() -> u32 {
    45
}
fn default_gap_days() -> u32 {
    1
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            history_limit: default_history_limit(),
            split_day: default_split_day(),
            gap_days: default_gap_days(),
            template_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "default_items")]
    pub items_per_type: usize,
    #[serde(default = "default_users")]
    pub users: usize,
    #[serde(default = "default_events")]
    pub events_per_user: usize,
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    #[serde(default = "default_affinity")]
    pub affinity: f64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_days")]
    pub days: u32,
    #[serde(default = "default_separation")]
    pub separation: f64,
}

fn default_items() -> usize {
    5000
}
fn default_users() -> usize {
    2000
}
fn default_events() -> usize {
    50
}
fn default_clusters() -> usize {
    16
}
fn default_affinity() -> f64 {
    0.8
}
fn default_dim() -> usize {
    48
}
fn default_days() -> u32 {
    50
}
fn default_separation() -> f64 {
    3.0
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            items_per_type: default_items(),
            users: default_users(),
            events_per_user: default_events(),
            clusters: default_clusters(),
            affinity: default_affinity(),
            dim: default_dim(),
            days: default_days(),
            separation: default_separation(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: PipelineConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.validate(path)?;
        Ok(config)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        if self.version != CONFIG_VERSION {
            bail!(
                "{}: unsupported config version {} (expected {})",
                path.display(),
                self.version,
                CONFIG_VERSION
            );
        }
        if self.item_types.is_empty() {
            bail!("{}: at least one [[types]] entry required", path.display());
        }
        let mut seen = BTreeSet::new();
        for t in &self.item_types {
            if !seen.insert(&t.name) {
                bail!(
                    "{}: item type {:?} declared more than once",
                    path.display(),
                    t.name
                );
            }
            if t.quantizer == QuantizerKind::Lsh && !t.k.is_power_of_two() {
                bail!(
                    "{}: type {:?} uses the lsh quantizer, so k must be a power of two (got {})",
                    path.display(),
                    t.name,
                    t.k
                );
            }
        }
        Ok(())
    }

    pub fn codebook_path(&self, type_name: &str) -> PathBuf {
        self.paths.workdir.join(format!("codebook_{type_name}.sidc"))
    }

    pub fn lsh_path(&self, type_name: &str) -> PathBuf {
        self.paths.workdir.join(format!("lsh_{type_name}.sidl"))
    }

    pub fn registry_path(&self) -> PathBuf {
        self.paths.workdir.join("registry.tsv")
    }

    pub fn scorer_corpus_path(&self) -> PathBuf {
        self.paths.workdir.join("scorer_corpus.txt")
    }

    pub fn eval_prompts_path(&self) -> PathBuf {
        self.paths.workdir.join("eval_prompts.jsonl")
    }

    pub fn eval_labels_path(&self) -> PathBuf {
        self.paths.workdir.join("eval_labels.tsv")
    }

    pub fn records_path(&self, name: &str) -> PathBuf {
        self.paths.workdir.join(format!("records_{name}.jsonl"))
    }

    pub fn results_path(&self) -> PathBuf {
        self.paths.workdir.join("results.tsv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
seed = 7

[paths]
workdir = "out"
catalog = "out/catalog.tsv"
logs = "out/logs.tsv"

[vocab]
text_tokens = 256

[[types]]
name = "episode"
embeddings = "out/episode.emb"
m = 2
k = 8
target_dim = 4
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let config: PipelineConfig = toml::from_str(MINIMAL).unwrap();
        config.validate(Path::new("test.toml")).unwrap();
        assert_eq!(config.decode.beam_width, 30);
        assert_eq!(config.decode.temperature, 0.6);
        assert_eq!(config.decode.top_k, 20);
        assert_eq!(config.decode.top_p, 0.95);
        assert_eq!(config.datagen.history_limit, 50);
        assert_eq!(config.synth.clusters, 16);
        assert_eq!(config.synth.affinity, 0.8);
        assert_eq!(config.item_types[0].quantizer, QuantizerKind::Rkmeans);
    }

    #[test]
    fn duplicate_types_rejected() {
        let text = format!(
            "{MINIMAL}\n[[types]]\nname = \"episode\"\nembeddings = \"x.emb\"\nm = 1\nk = 2\ntarget_dim = 4\n"
        );
        let config: PipelineConfig = toml::from_str(&text).unwrap();
        assert!(config.validate(Path::new("test.toml")).is_err());
    }

    #[test]
    fn lsh_requires_power_of_two_k() {
        let text = MINIMAL.replace("k = 8", "k = 6\nquantizer = \"lsh\"");
        let config: PipelineConfig = toml::from_str(&text).unwrap();
        assert!(config.validate(Path::new("test.toml")).is_err());
    }
}
