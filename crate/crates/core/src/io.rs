//! File formats: the world JSON document, the JSONL preference dataset and
//! the policy JSON snapshot.
//!
//! The world document is `{version, seed, P, V, lengths, rewards,
//! reference_logits}` with out-of-support rewards carried as the string
//! sentinel `"-inf"`. The dataset is one header line `{version, world_hash,
//! scheme, seed}` followed by one record per line. `world_hash` is 64-bit
//! FNV-1a over the canonical (compact) world JSON, printed as 16 hex
//! digits; it is stable within this implementation and ties datasets and
//! policies back to the world they came from.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::fnv1a64;
use crate::prefs::{Dataset, PreferenceRecord, SchemeInfo, WeakNegatives};
use crate::world::{ResponseVocab, RewardTable, TabularPolicy, World};

pub const WORLD_FORMAT_VERSION: u32 = 1;
pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const POLICY_FORMAT_VERSION: u32 = 1;

/// A real number that may be the `-inf` sentinel.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum JsonReal {
    Num(f64),
    Sentinel(String),
}

impl JsonReal {
    fn encode(v: f64) -> Self {
        if v == f64::NEG_INFINITY {
            JsonReal::Sentinel("-inf".to_string())
        } else {
            JsonReal::Num(v)
        }
    }

    fn decode(&self) -> Result<f64> {
        match self {
            JsonReal::Num(v) => Ok(*v),
            JsonReal::Sentinel(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            JsonReal::Sentinel(s) => Err(Error::data(format!("unknown reward sentinel {s:?}"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WorldFile {
    version: u32,
    seed: u64,
    #[serde(rename = "P")]
    p: usize,
    #[serde(rename = "V")]
    v: usize,
    lengths: Vec<u32>,
    rewards: Vec<Vec<JsonReal>>,
    reference_logits: Vec<Vec<f64>>,
}

fn world_to_file(world: &World) -> WorldFile {
    WorldFile {
        version: WORLD_FORMAT_VERSION,
        seed: world.seed,
        p: world.n_prompts(),
        v: world.n_responses(),
        lengths: world.vocab.lengths().to_vec(),
        rewards: world
            .rewards
            .values()
            .outer_iter()
            .map(|row| row.iter().map(|&x| JsonReal::encode(x)).collect())
            .collect(),
        reference_logits: world
            .reference
            .logits()
            .outer_iter()
            .map(|row| row.to_vec())
            .collect(),
    }
}

fn world_from_file(file: &WorldFile) -> Result<World> {
    if file.version != WORLD_FORMAT_VERSION {
        return Err(Error::data(format!(
            "unsupported world format version {}",
            file.version
        )));
    }
    if file.lengths.len() != file.v
        || file.rewards.len() != file.p
        || file.reference_logits.len() != file.p
    {
        return Err(Error::data("world file dimensions are inconsistent"));
    }
    let vocab = ResponseVocab::new(file.lengths.clone())?;
    let mut rewards = Array2::zeros((file.p, file.v));
    let mut reference = Array2::zeros((file.p, file.v));
    for (i, (rrow, lrow)) in file.rewards.iter().zip(&file.reference_logits).enumerate() {
        if rrow.len() != file.v || lrow.len() != file.v {
            return Err(Error::data(format!("world file row {i} has wrong length")));
        }
        for j in 0..file.v {
            rewards[[i, j]] = rrow[j].decode()?;
            reference[[i, j]] = lrow[j];
        }
    }
    World::new(
        vocab,
        RewardTable::new(rewards)?,
        TabularPolicy::from_logits(reference)?,
        file.seed,
    )
}

/// Canonical (compact) world JSON; the hashing preimage.
pub fn canonical_world_json(world: &World) -> String {
    serde_json::to_string(&world_to_file(world)).expect("world serialization cannot fail")
}

/// 64-bit FNV-1a over the canonical world JSON.
pub fn world_hash(world: &World) -> u64 {
    fnv1a64(canonical_world_json(world).as_bytes())
}

pub fn world_hash_hex(world: &World) -> String {
    format!("{:016x}", world_hash(world))
}

pub fn save_world(world: &World, path: &Path) -> Result<()> {
    // Reference logits are stored as plain JSON numbers, so partial-support
    // references (which the world invariants forbid anyway) cannot be
    // serialized faithfully.
    if !world.reference.is_full_support() {
        return Err(Error::data("cannot serialize a non-full-support reference"));
    }
    let text = serde_json::to_string_pretty(&world_to_file(world))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_world(path: &Path) -> Result<World> {
    let text = fs::read_to_string(path)?;
    let file: WorldFile = serde_json::from_str(&text)?;
    world_from_file(&file)
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    version: u32,
    world_hash: String,
    scheme: SchemeInfo,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    prompt_id: usize,
    winner_id: usize,
    strong: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weak: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weak_n: Option<usize>,
}

/// Serializes a dataset to JSONL: header line first, then one record per line.
pub fn dataset_to_jsonl(dataset: &Dataset) -> Result<String> {
    let mut out = String::new();
    let header = DatasetHeader {
        version: DATASET_FORMAT_VERSION,
        world_hash: format!("{:016x}", dataset.world_hash),
        scheme: dataset.scheme.clone(),
        seed: dataset.seed,
    };
    out.push_str(&serde_json::to_string(&header)?);
    out.push('\n');
    for record in &dataset.records {
        let line = RecordLine {
            prompt_id: record.prompt_id,
            winner_id: record.winner_id,
            strong: record.strong_ids.clone(),
            weak: match &record.weak {
                WeakNegatives::Ids(ids) => Some(ids.clone()),
                WeakNegatives::InBatch(_) => None,
            },
            weak_n: match &record.weak {
                WeakNegatives::Ids(_) => None,
                WeakNegatives::InBatch(n) => Some(*n),
            },
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn dataset_from_jsonl(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header_line = lines
        .next()
        .ok_or_else(|| Error::data("dataset file is empty"))?;
    let header: DatasetHeader = serde_json::from_str(header_line)?;
    if header.version != DATASET_FORMAT_VERSION {
        return Err(Error::data(format!(
            "unsupported dataset format version {}",
            header.version
        )));
    }
    let world_hash = u64::from_str_radix(&header.world_hash, 16)
        .map_err(|_| Error::data("dataset header world_hash is not 16 hex digits"))?;
    let mut records = Vec::new();
    for line in lines {
        let raw: RecordLine = serde_json::from_str(line)?;
        let weak = match (raw.weak, raw.weak_n) {
            (Some(ids), None) => WeakNegatives::Ids(ids),
            (None, Some(n)) => WeakNegatives::InBatch(n),
            (None, None) => WeakNegatives::none(),
            (Some(_), Some(_)) => {
                return Err(Error::data("record carries both weak ids and weak_n"))
            }
        };
        records.push(PreferenceRecord {
            prompt_id: raw.prompt_id,
            winner_id: raw.winner_id,
            strong_ids: raw.strong,
            weak,
        });
    }
    Ok(Dataset {
        world_hash,
        scheme: header.scheme,
        seed: header.seed,
        records,
    })
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset_to_jsonl(dataset)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_jsonl(&fs::read_to_string(path)?)
}

/// Verifies that a dataset was generated from this world.
pub fn check_dataset_world(dataset: &Dataset, world: &World) -> Result<()> {
    let expected = world_hash(world);
    if dataset.world_hash != expected {
        return Err(Error::data(format!(
            "dataset world_hash {:016x} does not match world {expected:016x}",
            dataset.world_hash
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyFile {
    version: u32,
    #[serde(rename = "P")]
    p: usize,
    #[serde(rename = "V")]
    v: usize,
    logits: Vec<Vec<JsonReal>>,
    world_hash: String,
    config_digest: String,
}

pub fn save_policy(
    policy: &TabularPolicy,
    world_hash_hex: &str,
    config_digest: &str,
    path: &Path,
) -> Result<()> {
    let file = PolicyFile {
        version: POLICY_FORMAT_VERSION,
        p: policy.n_prompts(),
        v: policy.n_responses(),
        logits: policy
            .logits()
            .outer_iter()
            .map(|row| row.iter().map(|&x| JsonReal::encode(x)).collect())
            .collect(),
        world_hash: world_hash_hex.to_string(),
        config_digest: config_digest.to_string(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)? + "\n")?;
    Ok(())
}

pub fn load_policy(path: &Path) -> Result<TabularPolicy> {
    let text = fs::read_to_string(path)?;
    let file: PolicyFile = serde_json::from_str(&text)?;
    if file.version != POLICY_FORMAT_VERSION {
        return Err(Error::data(format!(
            "unsupported policy format version {}",
            file.version
        )));
    }
    if file.logits.len() != file.p {
        return Err(Error::data("policy file dimensions are inconsistent"));
    }
    let mut logits = Array2::zeros((file.p, file.v));
    for (i, row) in file.logits.iter().enumerate() {
        if row.len() != file.v {
            return Err(Error::data(format!("policy row {i} has wrong length")));
        }
        for j in 0..file.v {
            logits[[i, j]] = row[j].decode()?;
        }
    }
    TabularPolicy::from_logits(logits)
}
