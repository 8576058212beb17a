//! Command-line arguments and their merge with an optional JSON config file.
//!
//! Every mergeable option is an `Option` so that "not given on the command
//! line" can be told apart from a default. The config file is a flat JSON
//! object whose keys are the long flag names; flags win over the file, and
//! defaults are applied only after the merge.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "iwgvem", version, about = "IW-GVEM estimation for M2PL item response models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a response matrix.
    Fit(FitArgs),
    /// Run a replicated simulation study.
    Study(StudyArgs),
    /// Compare the GVEM bound with importance-weighted bounds across M.
    Elbo(ElboArgs),
}

/// Flags shared by every command.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct Common {
    /// Master seed; all randomness derives from it.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Worker thread cap (default: all cores). Results do not depend on it.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Estimation settings shared by `fit` and `study`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct Tuning {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gvem_tol: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gvem_max_iter: Option<usize>,
    /// Outer importance-sampling replications S.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_outer: Option<usize>,
    /// Inner importance samples M.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_inner: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iw_tol: Option<f64>,
    /// 0 skips the importance-weighted phase.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iw_max_iter: Option<usize>,
    /// Candidate learning rates, comma separated. One value skips the search.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<Vec<f64>>,
    /// Adam steps per candidate during the learning-rate search.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_budget: Option<usize>,
    /// Reuse the first importance draw instead of redrawing every iteration.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reuse_samples: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub promax_power: Option<u32>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct FitArgs {
    /// JSON file of flag values; flags given on the command line win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Response CSV: N rows of 0/1, J columns, optional header row.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Loading mask CSV (J rows, K columns of 0/1) or `exploratory:K`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub structure: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub tuning: Tuning,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct DesignArgs {
    /// Sample size.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Number of factors.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Number of items (default: 30 for K = 2, 55 for K = 5, else 15K).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub j: Option<usize>,
    /// `between` or `within`.
    #[arg(long = "items")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub items: Option<String>,
    /// `low`, `high`, a single correlation `r`, or a band `lo:hi`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation: Option<String>,
    /// `confirmatory` or `exploratory`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct StudyArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub design: DesignArgs,
    /// Run every cell of the 2x2x2x2x2 design grid instead of one design.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub full_grid: Option<bool>,
    /// Print the design cells and exit without fitting.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub list_cells: Option<bool>,
    /// Methods to run: `gvem`, `iw_gvem` (comma separated).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<String>>,
    /// Write wall-clock seconds into the record CSV (breaks byte-identical
    /// reruns).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<bool>,
    /// Run replications one after another.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sequential: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    pub tuning: Tuning,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct ElboArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub design: DesignArgs,
    /// Inner sample sizes M, comma separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_grid: Option<Vec<usize>>,
    /// Outer replications S per IW-ELBO estimate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_outer: Option<usize>,
}

/// Overlays command-line values on the config file. Both sides go through
/// JSON so that the file accepts exactly the flag names.
pub fn merge_with_config<T>(flags: &T, config: Option<&Path>) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned,
{
    let Some(path) = config else {
        return serde_json::from_value(to_value(flags)?).map_err(|e| CliError::Usage(e.to_string()));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let file: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    let serde_json::Value::Object(mut merged) = file else {
        return Err(CliError::Usage(format!("config {} must be a JSON object", path.display())));
    };
    if let serde_json::Value::Object(given) = to_value(flags)? {
        merged.extend(given);
    }
    let parsed: T = serde_json::from_value(serde_json::Value::Object(merged.clone()))
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    // anything that did not survive the round trip is not a known option
    if let serde_json::Value::Object(known) = to_value(&parsed)? {
        if let Some(key) = merged.keys().find(|k| !known.contains_key(*k) && !merged[*k].is_null()) {
            return Err(CliError::Usage(format!("config {}: unknown option `{key}`", path.display())));
        }
    }
    Ok(parsed)
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Usage(e.to_string()))
}
