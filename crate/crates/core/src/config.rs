//! Loss configuration: the experiment descriptor selecting a training loss,
//! its temperature, negative counts and the loss-modification tricks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prefs::{Dataset, WeakNegatives};

/// Training loss selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Pairwise sigmoid loss on the log-ratio reward gap.
    Dpo,
    /// Negative-log-softmax of the winner against its own strong negative
    /// plus winner/loser pairs borrowed from other in-batch records.
    EpaNarrow,
    /// Negative-log-softmax of the winner against arbitrary strong and weak
    /// negative sets.
    EpaGeneral,
    /// Sampled energy-discrepancy statistic over kernel-drawn negatives.
    EdStat,
    /// Squared regression of the reward gap onto a constant target.
    Ipo,
    /// Listwise Plackett-Luce likelihood over a full ranking.
    DpoPl,
}

impl LossVariant {
    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Dpo => "dpo",
            LossVariant::EpaNarrow => "epa",
            LossVariant::EpaGeneral => "epa-general",
            LossVariant::EdStat => "ed-stat",
            LossVariant::Ipo => "ipo",
            LossVariant::DpoPl => "dpo-pl",
        }
    }
}

/// Where weak negatives come from at training time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeakSource {
    /// Resolved during batch assembly from the other records of the batch.
    InBatch,
    /// Taken verbatim from ids stored on each record.
    Precomputed,
}

/// Loss-modification switches. Tricks compose in field order: the reference
/// drop and length transforms act on the reward, the margin acts on strong
/// negatives, and the SFT term and on-policy weight act on the record loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tricks {
    /// Drop the reference term from the log-ratio reward.
    pub remove_ref: bool,
    /// Coefficient on the added `-log pi(y_w|x)` term; 0 disables it.
    pub sft_coef: f64,
    /// Length penalty: subtract `alpha * |y|` from each reward.
    pub len_penalty_alpha: f64,
    /// Length normalization: scale each reward by `1/|y|`.
    pub len_normalize: bool,
    /// Per-record on-policy weight, detached from the gradient.
    pub on_policy_weight: bool,
}

impl Default for Tricks {
    fn default() -> Self {
        Self {
            remove_ref: false,
            sft_coef: 0.0,
            len_penalty_alpha: 0.0,
            len_normalize: false,
            on_policy_weight: false,
        }
    }
}

impl Tricks {
    pub fn any_active(&self) -> bool {
        self.remove_ref
            || self.sft_coef > 0.0
            || self.len_penalty_alpha > 0.0
            || self.len_normalize
            || self.on_policy_weight
    }
}

/// Parameters of the sampled energy-discrepancy loss: the stay probability
/// of the symmetric perturbation kernel and the number of drawn negatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdStatParams {
    pub stay_prob: f64,
    pub negatives: usize,
}

/// The experiment descriptor handed to every loss and to the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub beta: f64,
    pub n_weak: usize,
    pub weak_source: WeakSource,
    /// Constant margin added to each strong negative's reward; 0 disables.
    pub margin_mc: f64,
    /// Regression target of the IPO gap.
    pub ipo_tau: f64,
    pub tricks: Tricks,
    /// Required when `variant == EdStat`, ignored otherwise.
    pub ed: Option<EdStatParams>,
}

impl LossConfig {
    pub fn new(variant: LossVariant, beta: f64) -> Self {
        Self {
            variant,
            beta,
            n_weak: 0,
            weak_source: WeakSource::InBatch,
            margin_mc: 0.0,
            ipo_tau: 0.5,
            tricks: Tricks::default(),
            ed: None,
        }
    }

    pub fn with_weak(mut self, n_weak: usize, source: WeakSource) -> Self {
        self.n_weak = n_weak;
        self.weak_source = source;
        self
    }

    /// Basic parameter validity, independent of any dataset.
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::config(
                "beta must be > 0 (it scales the logit even when the reference is removed)",
            ));
        }
        if self.variant == LossVariant::EdStat {
            match self.ed {
                None => {
                    return Err(Error::config(
                        "variant ed-stat requires ed parameters (stay_prob, negatives)",
                    ))
                }
                Some(p) => {
                    if !(p.stay_prob > 0.0 && p.stay_prob < 1.0) {
                        return Err(Error::config("ed stay_prob must lie in (0,1)"));
                    }
                    if p.negatives < 1 {
                        return Err(Error::config("ed negatives must be >= 1"));
                    }
                }
            }
        }
        if self.tricks.sft_coef < 0.0 || self.tricks.len_penalty_alpha < 0.0 {
            return Err(Error::config("trick coefficients must be nonnegative"));
        }
        Ok(())
    }

    /// Checks the config against the shape of a dataset and an intended
    /// batch size. Returns non-fatal warnings (e.g. a degenerate loss).
    pub fn validate_against(&self, dataset: &Dataset, batch_size: usize) -> Result<Vec<String>> {
        self.validate()?;
        let mut warnings = Vec::new();

        let strong_counts: Vec<usize> = dataset.records.iter().map(|r| r.strong_ids.len()).collect();
        let has_precomputed_weak = dataset
            .records
            .iter()
            .any(|r| matches!(&r.weak, WeakNegatives::Ids(ids) if !ids.is_empty()));

        match self.variant {
            LossVariant::Dpo | LossVariant::Ipo => {
                if strong_counts.iter().any(|&k| k != 1) {
                    return Err(Error::config(format!(
                        "{} requires exactly one strong negative per record",
                        self.variant.name()
                    )));
                }
                if self.n_weak != 0 {
                    return Err(Error::config(format!(
                        "{} does not take weak negatives (n_weak must be 0)",
                        self.variant.name()
                    )));
                }
            }
            LossVariant::EpaNarrow => {
                if strong_counts.iter().any(|&k| k != 1) {
                    return Err(Error::config(
                        "epa (narrow) requires exactly one strong negative per record",
                    ));
                }
                if self.n_weak == 0 {
                    return Err(Error::config(
                        "epa with n_weak = 0 reduces to dpo; use the dpo loss",
                    ));
                }
                if !self.n_weak.is_multiple_of(2) {
                    return Err(Error::config(
                        "epa (narrow) draws winner/loser pairs, so n_weak must be even",
                    ));
                }
                if self.weak_source != WeakSource::InBatch {
                    return Err(Error::config(
                        "epa (narrow) borrows pairs from the batch; weak_source must be in_batch",
                    ));
                }
                if self.n_weak / 2 > batch_size.saturating_sub(1) {
                    return Err(Error::config(
                        "epa (narrow) needs n_weak/2 <= batch_size - 1 donor records",
                    ));
                }
            }
            LossVariant::EpaGeneral => {
                if strong_counts.contains(&0) && self.n_weak == 0 {
                    warnings.push(
                        "empty negative set: epa-general degenerates to a zero loss".to_string(),
                    );
                }
                match self.weak_source {
                    WeakSource::InBatch => {
                        if self.n_weak > batch_size.saturating_sub(1) {
                            return Err(Error::config(
                                "in-batch weak sourcing needs n_weak <= batch_size - 1",
                            ));
                        }
                    }
                    WeakSource::Precomputed => {
                        if self.n_weak > 0 && !has_precomputed_weak {
                            return Err(Error::config(
                                "weak_source precomputed but dataset records carry no weak ids",
                            ));
                        }
                    }
                }
            }
            LossVariant::DpoPl => {
                if strong_counts.contains(&0) {
                    return Err(Error::config(
                        "dpo-pl needs a ranking of at least 2 responses per record",
                    ));
                }
                if self.n_weak != 0 {
                    return Err(Error::config("dpo-pl does not take weak negatives"));
                }
            }
            LossVariant::EdStat => {
                if self.n_weak != 0 {
                    warnings.push(
                        "ed-stat draws negatives from its kernel; n_weak is ignored".to_string(),
                    );
                }
            }
        }
        Ok(warnings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefs::{PreferenceRecord, SchemeInfo};

    fn pairwise_dataset(n: usize) -> Dataset {
        Dataset {
            world_hash: 0,
            scheme: SchemeInfo::ExplicitPairDist,
            seed: 0,
            records: (0..n).map(|i| PreferenceRecord::pairwise(0, i % 2, 2)).collect(),
        }
    }

    #[test]
    fn test_beta_must_be_positive_even_without_reference() {
        let mut cfg = LossConfig::new(LossVariant::Dpo, 0.0);
        cfg.tricks.remove_ref = true;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn test_narrow_rejects_zero_and_odd_weak_counts() {
        let ds = pairwise_dataset(4);
        let cfg = LossConfig::new(LossVariant::EpaNarrow, 0.1).with_weak(0, WeakSource::InBatch);
        assert!(cfg.validate_against(&ds, 4).is_err());
        let cfg = LossConfig::new(LossVariant::EpaNarrow, 0.1).with_weak(3, WeakSource::InBatch);
        assert!(cfg.validate_against(&ds, 4).is_err());
        let cfg = LossConfig::new(LossVariant::EpaNarrow, 0.1).with_weak(2, WeakSource::InBatch);
        assert!(cfg.validate_against(&ds, 4).is_ok());
    }

    #[test]
    fn test_in_batch_weak_count_bounded_by_batch() {
        let ds = pairwise_dataset(4);
        let cfg = LossConfig::new(LossVariant::EpaGeneral, 0.1).with_weak(4, WeakSource::InBatch);
        assert!(cfg.validate_against(&ds, 4).is_err());
        let cfg = LossConfig::new(LossVariant::EpaGeneral, 0.1).with_weak(3, WeakSource::InBatch);
        assert!(cfg.validate_against(&ds, 4).is_ok());
    }

    #[test]
    fn test_ed_stat_requires_params() {
        let cfg = LossConfig::new(LossVariant::EdStat, 0.1);
        assert!(cfg.validate().is_err());
        let mut cfg = LossConfig::new(LossVariant::EdStat, 0.1);
        cfg.ed = Some(EdStatParams {
            stay_prob: 0.5,
            negatives: 8,
        });
        assert!(cfg.validate().is_ok());
    }
}
