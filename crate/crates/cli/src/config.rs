//! Config-file loading and flag merging.
//!
//! A run is configured in three layers: built-in defaults, then the TOML
//! config file, then command-line flags. Later layers win and every
//! override of a file value is logged with its provenance so runs stay
//! auditable.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hydragen_core::bench::{SweepConfig, TreeWorkload};
use hydragen_core::engine::EngineKind;
use hydragen_core::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

/// On-disk layout of the config file. Top-level scalars plus one section
/// per subsystem; unknown keys are rejected.
#[derive(Debug, Clone, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    /// 0 means "all available cores".
    pub threads: Option<usize>,
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub tree: Option<TreeWorkload>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))
    }
}

/// Fully resolved run configuration after merging defaults, file, and
/// flags.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub threads: usize,
    pub output: PathBuf,
    pub sweep: SweepConfig,
    pub model: ModelConfig,
    pub tree: TreeWorkload,
}

/// Flag overrides shared by every subcommand; each one mirrors a leaf key
/// of the config file.
#[derive(Debug, Clone, clap::Args)]
pub struct Overrides {
    /// Config file (TOML) with run settings.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Seed for every generator in the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Element precision for computation.
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,

    /// Worker threads for internal parallelism; 0 uses all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Output path for result files.
    #[arg(long, global = true, value_name = "PATH")]
    pub output: Option<PathBuf>,

    /// Comma-separated batch sizes (sweep.batch_sizes).
    #[arg(long, global = true, value_delimiter = ',', value_name = "N,..")]
    pub batch_sizes: Option<Vec<usize>>,

    /// Comma-separated shared-prefix lengths (sweep.prefix_lengths).
    #[arg(long, global = true, value_delimiter = ',', value_name = "N,..")]
    pub prefix_lengths: Option<Vec<usize>>,

    /// Comma-separated per-sequence suffix lengths (sweep.suffix_lengths).
    #[arg(long, global = true, value_delimiter = ',', value_name = "N,..")]
    pub suffix_lengths: Option<Vec<usize>>,

    /// Query heads (sweep.num_query_heads and model.num_query_heads).
    #[arg(long, global = true, value_name = "N")]
    pub heads: Option<usize>,

    /// Key/value heads (sweep.num_kv_heads and model.num_kv_heads).
    #[arg(long, global = true, value_name = "N")]
    pub kv_heads: Option<usize>,

    /// Head dimension (sweep.head_dim and model head dim).
    #[arg(long, global = true, value_name = "N")]
    pub head_dim: Option<usize>,

    /// Tokens to generate per sequence (sweep.num_new_tokens).
    #[arg(long, global = true, value_name = "N")]
    pub num_tokens: Option<usize>,

    /// Comma-separated engines: hydragen, per-sequence, no-attention.
    #[arg(long, global = true, value_delimiter = ',', value_name = "NAME,..")]
    pub engines: Option<Vec<String>>,
}

fn log_override(key: &str, file_value: &dyn std::fmt::Debug, flag_value: &dyn std::fmt::Debug) {
    eprintln!(
        "config: --{} overrides file value {:?} with {:?}",
        key, file_value, flag_value
    );
}

/// Applies `flag` over `current`, logging when it displaces a value that
/// came from the config file.
fn merge<T: std::fmt::Debug + Clone + PartialEq>(
    key: &str,
    current: &mut T,
    from_file: bool,
    flag: &Option<T>,
) {
    if let Some(value) = flag {
        if from_file && current != value {
            log_override(key, current, value);
        }
        *current = value.clone();
    }
}

impl Overrides {
    /// Resolves defaults, file, and flags into one [`RunConfig`].
    pub fn resolve(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };

        let mut seed = file.seed.unwrap_or(0);
        merge("seed", &mut seed, file.seed.is_some(), &self.seed);

        let mut precision = file.precision.unwrap_or(Precision::Single);
        merge(
            "precision",
            &mut precision,
            file.precision.is_some(),
            &self.precision,
        );

        let mut threads = file.threads.unwrap_or(0);
        merge("threads", &mut threads, file.threads.is_some(), &self.threads);

        let mut output = file.output.clone().unwrap_or_else(|| "results.csv".into());
        merge("output", &mut output, file.output.is_some(), &self.output);

        let sweep_from_file = file.sweep.is_some();
        let mut sweep = file.sweep.clone().unwrap_or_default();
        merge(
            "batch-sizes",
            &mut sweep.batch_sizes,
            sweep_from_file,
            &self.batch_sizes,
        );
        merge(
            "prefix-lengths",
            &mut sweep.prefix_lengths,
            sweep_from_file,
            &self.prefix_lengths,
        );
        merge(
            "suffix-lengths",
            &mut sweep.suffix_lengths,
            sweep_from_file,
            &self.suffix_lengths,
        );
        merge(
            "heads",
            &mut sweep.num_query_heads,
            sweep_from_file,
            &self.heads,
        );
        merge(
            "kv-heads",
            &mut sweep.num_kv_heads,
            sweep_from_file,
            &self.kv_heads,
        );
        merge(
            "head-dim",
            &mut sweep.head_dim,
            sweep_from_file,
            &self.head_dim,
        );
        merge(
            "num-tokens",
            &mut sweep.num_new_tokens,
            sweep_from_file,
            &self.num_tokens,
        );
        if let Some(names) = &self.engines {
            let engines = names
                .iter()
                .map(|n| n.parse::<EngineKind>())
                .collect::<Result<Vec<_>, _>>()?;
            if sweep_from_file && sweep.engines != engines {
                log_override("engines", &sweep.engines, &engines);
            }
            sweep.engines = engines;
        }
        sweep.seed = seed;

        let model_from_file = file.model.is_some();
        let mut model = file.model.clone().unwrap_or_default();
        merge(
            "heads",
            &mut model.num_query_heads,
            model_from_file,
            &self.heads,
        );
        merge(
            "kv-heads",
            &mut model.num_kv_heads,
            model_from_file,
            &self.kv_heads,
        );
        if let Some(head_dim) = self.head_dim {
            // The model stores model_dim; a head-dim flag rescales it.
            let new_dim = head_dim * model.num_query_heads;
            if model_from_file && model.model_dim != new_dim {
                log_override("head-dim (model_dim)", &model.model_dim, &new_dim);
            }
            model.model_dim = new_dim;
            model.mlp_hidden = 4 * new_dim;
        }
        model.seed = seed;

        let tree = file.tree.clone().unwrap_or_default();

        if sweep.num_query_heads % sweep.num_kv_heads.max(1) != 0 {
            bail!(
                "query heads {} not divisible by kv heads {}",
                sweep.num_query_heads,
                sweep.num_kv_heads
            );
        }

        Ok(RunConfig {
            seed,
            precision,
            threads,
            output,
            sweep,
            model,
            tree,
        })
    }
}
