//! Effective experiment configurations: defaults, config-file loading,
//! flag overrides and the digest embedded in every output.
//!
//! Precedence is flags over config-file fields over defaults; the merged
//! (effective) config is always written next to the outputs so a run can
//! be replayed from its own artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use preflab_core::numeric::fnv1a64;
use preflab_core::{Error, Result};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

/// Digest of an effective config: FNV-1a over its compact JSON.
pub fn config_digest<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("config serialization cannot fail");
    format!("{:016x}", fnv1a64(json.as_bytes()))
}

#[derive(Serialize)]
struct Effective<'a, T: Serialize> {
    config_digest: String,
    config: &'a T,
}

/// Writes the effective config (with its digest) alongside the outputs.
pub fn write_effective<T: Serialize>(config: &T, digest: &str, path: &Path) -> Result<()> {
    let wrapped = Effective {
        config_digest: digest.to_string(),
        config,
    };
    fs::write(path, serde_json::to_string_pretty(&wrapped)? + "\n")?;
    Ok(())
}

/// Loads a config file when given; fields the flags do not override.
pub fn load_config_file<T: DeserializeOwned>(path: &Option<PathBuf>) -> Result<Option<T>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read config file {p:?}: {e}")))?;
            let parsed = serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("invalid config file {p:?}: {e}")))?;
            Ok(Some(parsed))
        }
    }
}

/// Output directories are never created implicitly.
pub fn check_out_dir(out: &Path) -> Result<()> {
    if !out.is_dir() {
        return Err(Error::config(format!(
            "output directory {} does not exist",
            out.display()
        )));
    }
    Ok(())
}

/// Picks `flag`, then the config-file value, then the default.
pub fn pick<T: Clone>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Like [`pick`] but the field stays optional.
pub fn pick_opt<T: Clone>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

/// Generation config (the `gen` subcommand).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub prompts: usize,
    pub vocab: usize,
    pub records: usize,
    pub scheme: String,
    pub k: usize,
    pub n_strong: usize,
    pub y_star: Option<usize>,
    pub reward_spread: f64,
    pub weak_floor: f64,
    pub n_weak: usize,
    pub weak_mode: String,
    pub seed: u64,
}

/// Optional-field mirror of [`GenConfig`] for config files.
#[derive(Debug, Default, Clone, Deserialize)]
pub struct GenConfigFile {
    pub prompts: Option<usize>,
    pub vocab: Option<usize>,
    pub records: Option<usize>,
    pub scheme: Option<String>,
    pub k: Option<usize>,
    pub n_strong: Option<usize>,
    pub y_star: Option<usize>,
    pub reward_spread: Option<f64>,
    pub weak_floor: Option<f64>,
    pub n_weak: Option<usize>,
    pub weak_mode: Option<String>,
    pub seed: Option<u64>,
}

/// Training config (the `train` subcommand).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCliConfig {
    pub world: PathBuf,
    pub dataset: PathBuf,
    pub loss: String,
    pub beta: f64,
    pub n_weak: usize,
    pub weak_source: String,
    pub margin: f64,
    pub ipo_tau: f64,
    pub tricks: String,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: String,
    pub checkpoint_every: usize,
    pub audit: bool,
    pub seed: u64,
}

#[derive(Debug, Default, Clone, Deserialize)]
pub struct TrainCliConfigFile {
    pub world: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub loss: Option<String>,
    pub beta: Option<f64>,
    pub n_weak: Option<usize>,
    pub weak_source: Option<String>,
    pub margin: Option<f64>,
    pub ipo_tau: Option<f64>,
    pub tricks: Option<String>,
    pub lr: Option<f64>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<String>,
    pub checkpoint_every: Option<usize>,
    pub audit: Option<bool>,
    pub seed: Option<u64>,
}

/// Frontier config (the `frontier` subcommand).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontierCliConfig {
    pub world: PathBuf,
    pub dataset: PathBuf,
    pub methods: String,
    pub betas: String,
    pub n_weak: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: String,
    pub seed: u64,
}

#[derive(Debug, Default, Clone, Deserialize)]
pub struct FrontierCliConfigFile {
    pub world: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub methods: Option<String>,
    pub betas: Option<String>,
    pub n_weak: Option<usize>,
    pub lr: Option<f64>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<String>,
    pub seed: Option<u64>,
}

/// Certify config (the `certify` subcommand).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertifyCliConfig {
    pub world: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub only: Option<String>,
    pub seed: u64,
}
