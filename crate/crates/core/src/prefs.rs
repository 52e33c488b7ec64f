//! Offline preference data: one record per observed comparison, bundled into
//! a dataset that remembers how it was generated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::World;

/// Weak negatives attached to a record. `Ids` stores resolved response ids
/// (always scored under the record's own prompt); `InBatch` defers the
/// choice to batch assembly and only records how many to draw.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeakNegatives {
    Ids(Vec<usize>),
    InBatch(usize),
}

impl WeakNegatives {
    pub fn none() -> Self {
        WeakNegatives::Ids(Vec::new())
    }

    pub fn count(&self) -> usize {
        match self {
            WeakNegatives::Ids(ids) => ids.len(),
            WeakNegatives::InBatch(n) => *n,
        }
    }
}

/// One preference observation: a winner, its strong negatives (dispreferred
/// responses to the same prompt, ordered by decreasing true reward when the
/// generator knows it) and optional weak negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub prompt_id: usize,
    pub winner_id: usize,
    pub strong_ids: Vec<usize>,
    pub weak: WeakNegatives,
}

impl PreferenceRecord {
    pub fn pairwise(prompt_id: usize, winner_id: usize, loser_id: usize) -> Self {
        Self {
            prompt_id,
            winner_id,
            strong_ids: vec![loser_id],
            weak: WeakNegatives::none(),
        }
    }

    /// Checks the record's internal invariants against a world's dimensions.
    pub fn validate(&self, world: &World) -> Result<()> {
        let v = world.n_responses();
        if self.prompt_id >= world.n_prompts() {
            return Err(Error::data(format!(
                "record: prompt id {} out of range",
                self.prompt_id
            )));
        }
        if self.winner_id >= v {
            return Err(Error::data("record: winner id out of range"));
        }
        if self.strong_ids.iter().any(|&id| id >= v) {
            return Err(Error::data("record: strong negative id out of range"));
        }
        if self.strong_ids.contains(&self.winner_id) {
            return Err(Error::data(
                "record: winner listed among its strong negatives",
            ));
        }
        if let WeakNegatives::Ids(ids) = &self.weak {
            if ids.iter().any(|&id| id >= v) {
                return Err(Error::data("record: weak negative id out of range"));
            }
            if ids.contains(&self.winner_id) {
                return Err(Error::data(
                    "record: winner listed among its weak negatives",
                ));
            }
        }
        Ok(())
    }
}

/// Compact description of the generator that produced a dataset; stored in
/// the dataset header so runs are self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchemeInfo {
    BestOfK { k: usize, n_strong: usize },
    ExplicitPairDist,
    DegenerateAvoidYstar { y_star: usize },
}

/// A generated preference dataset plus the provenance needed to replay it:
/// the hash of the world it was drawn from, the scheme descriptor and the
/// generator seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub world_hash: u64,
    pub scheme: SchemeInfo,
    pub seed: u64,
    pub records: Vec<PreferenceRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self, world: &World) -> Result<()> {
        for record in &self.records {
            record.validate(world)?;
        }
        Ok(())
    }
}
