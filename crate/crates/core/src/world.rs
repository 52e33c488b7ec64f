//! Ground-truth environment types: response vocabulary, true-reward table,
//! tabular softmax policies and the perturbation kernel used for negative
//! sampling.
//!
//! Conventions shared by everything downstream:
//!
//! - A reward of `-inf` marks a response outside the preference support of a
//!   prompt. It is a distinguished sentinel, never an approximation: such a
//!   response carries probability exactly 0 under every Boltzmann
//!   distribution built from the row.
//! - Policy logits may be `-inf` (probability exactly 0) but never `+inf` or
//!   NaN, and every row needs at least one finite logit. Reference policies
//!   are additionally required to be full-support (all logits finite).
//! - All row normalizers are evaluated with log-sum-exp.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{log_softmax, log_sum_exp};

/// Normalization slack accepted on probability rows.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Global response vocabulary with synthetic token-length metadata.
/// Lengths are consumed only by the length-based loss tricks.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseVocab {
    size: usize,
    lengths: Vec<u32>,
}

impl ResponseVocab {
    pub fn new(lengths: Vec<u32>) -> Result<Self> {
        if lengths.len() < 2 {
            return Err(Error::config("vocabulary needs at least 2 responses"));
        }
        if lengths.contains(&0) {
            return Err(Error::config("every response length must be >= 1"));
        }
        Ok(Self {
            size: lengths.len(),
            lengths,
        })
    }

    /// Uniform unit lengths; the neutral choice when length tricks are off.
    pub fn unit(size: usize) -> Result<Self> {
        Self::new(vec![1; size])
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn length(&self, response: usize) -> u32 {
        self.lengths[response]
    }

    pub fn lengths(&self) -> &[u32] {
        &self.lengths
    }
}

/// P×V table of true rewards with `-inf` marking out-of-support entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable {
    values: Array2<f64>,
}

impl RewardTable {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        for (p, row) in values.outer_iter().enumerate() {
            let finite = row.iter().filter(|v| v.is_finite()).count();
            if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::data(format!(
                    "reward row {p}: entries must be finite or -inf"
                )));
            }
            if finite < 2 {
                return Err(Error::data(format!(
                    "reward row {p}: support must contain at least 2 responses"
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn n_prompts(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_responses(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, prompt: usize) -> Array1<f64> {
        self.values.row(prompt).to_owned()
    }

    pub fn get(&self, prompt: usize, response: usize) -> f64 {
        self.values[[prompt, response]]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Response ids with finite reward for the prompt.
    pub fn support(&self, prompt: usize) -> Vec<usize> {
        self.values
            .row(prompt)
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, _)| i)
            .collect()
    }
}

/// P×V logit table defining one softmax distribution per prompt.
///
/// This is both the object being trained and (as a frozen instance) the
/// reference policy. Logits of `-inf` are allowed and denote probability
/// exactly 0; `+inf`/NaN are rejected and each row must keep at least one
/// finite entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    logits: Array2<f64>,
}

impl TabularPolicy {
    pub fn from_logits(logits: Array2<f64>) -> Result<Self> {
        for (p, row) in logits.outer_iter().enumerate() {
            if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::data(format!(
                    "policy row {p}: logits must be finite or -inf"
                )));
            }
            if !row.iter().any(|v| v.is_finite()) {
                return Err(Error::data(format!("policy row {p}: empty support")));
            }
        }
        Ok(Self { logits })
    }

    /// Uniform policy over the vocabulary.
    pub fn uniform(n_prompts: usize, n_responses: usize) -> Self {
        Self {
            logits: Array2::zeros((n_prompts, n_responses)),
        }
    }

    pub fn n_prompts(&self) -> usize {
        self.logits.nrows()
    }

    pub fn n_responses(&self) -> usize {
        self.logits.ncols()
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Array2<f64> {
        &mut self.logits
    }

    pub fn logit(&self, prompt: usize, response: usize) -> f64 {
        self.logits[[prompt, response]]
    }

    /// Row of log-probabilities `logit - log_sum_exp(row)`.
    pub fn log_prob_row(&self, prompt: usize) -> Array1<f64> {
        let row: Vec<f64> = self.logits.row(prompt).to_vec();
        Array1::from(log_softmax(&row))
    }

    /// Row of probabilities; sums to 1 within [`ROW_SUM_TOL`].
    pub fn prob_row(&self, prompt: usize) -> Array1<f64> {
        self.log_prob_row(prompt).mapv(f64::exp)
    }

    pub fn log_prob(&self, prompt: usize, response: usize) -> f64 {
        let row: Vec<f64> = self.logits.row(prompt).to_vec();
        self.logits[[prompt, response]] - log_sum_exp(&row)
    }

    /// True when every logit is finite, i.e. every response has positive
    /// probability under every prompt.
    pub fn is_full_support(&self) -> bool {
        self.logits.iter().all(|v| v.is_finite())
    }
}

/// The ground-truth environment: vocabulary, true rewards, frozen reference
/// policy and the seed the world was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub vocab: ResponseVocab,
    pub rewards: RewardTable,
    pub reference: TabularPolicy,
    pub seed: u64,
}

impl World {
    pub fn new(
        vocab: ResponseVocab,
        rewards: RewardTable,
        reference: TabularPolicy,
        seed: u64,
    ) -> Result<Self> {
        if rewards.n_responses() != vocab.size() || reference.n_responses() != vocab.size() {
            return Err(Error::shape(
                "rewards/reference column count must equal vocabulary size",
            ));
        }
        if rewards.n_prompts() != reference.n_prompts() {
            return Err(Error::shape(
                "rewards and reference must agree on prompt count",
            ));
        }
        Ok(Self {
            vocab,
            rewards,
            reference,
            seed,
        })
    }

    pub fn n_prompts(&self) -> usize {
        self.rewards.n_prompts()
    }

    pub fn n_responses(&self) -> usize {
        self.vocab.size()
    }
}

/// Checks every invariant across the world's components and returns one
/// description per violation. Violations are data, not failures: an empty
/// list means the world is valid.
pub fn validate_world(world: &World) -> Vec<String> {
    let mut violations = Vec::new();
    let v = world.vocab.size();

    if v < 2 {
        violations.push("vocabulary: fewer than 2 responses".to_string());
    }
    for (i, &len) in world.vocab.lengths().iter().enumerate() {
        if len == 0 {
            violations.push(format!("vocabulary: response {i} has zero length"));
        }
    }

    if world.rewards.n_responses() != v || world.reference.n_responses() != v {
        violations.push("dimension mismatch: rewards/reference columns vs vocabulary".to_string());
    }
    if world.rewards.n_prompts() != world.reference.n_prompts() {
        violations.push("dimension mismatch: rewards vs reference prompt count".to_string());
    }

    for (p, row) in world.rewards.values().outer_iter().enumerate() {
        let finite = row.iter().filter(|x| x.is_finite()).count();
        if finite == 0 {
            violations.push(format!("row {p}: empty support"));
        } else if finite == 1 {
            violations.push(format!("row {p}: degenerate support (single response)"));
        }
        if row.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            violations.push(format!("row {p}: reward entries must be finite or -inf"));
        }
    }

    if !world.reference.is_full_support() {
        violations.push("reference not full-support".to_string());
    }
    for (p, row) in world.reference.logits().outer_iter().enumerate() {
        if row.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            violations.push(format!("reference row {p}: invalid logit"));
        } else if row.iter().any(|x| x.is_finite()) {
            let probs: Vec<f64> = log_softmax(&row.to_vec()).iter().map(|l| l.exp()).collect();
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                violations.push(format!("reference row {p}: probabilities do not normalize"));
            }
        }
    }

    violations
}

/// V×V perturbation kernel p(z|y), the negative-sampling source.
///
/// Rows are conditional distributions indexed by y. Validity requires row
/// normalization, entry-wise symmetry (which makes the kernel doubly
/// stochastic, the balance condition the sampled estimator relies on) and a
/// non-degenerate conditional on every row: the kernel must not collapse to
/// the identity, otherwise the conditional variance it must inject is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationKernel {
    rows: Array2<f64>,
}

impl PerturbationKernel {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() != rows.ncols() {
            return Err(Error::shape("perturbation kernel must be square"));
        }
        let v = rows.nrows();
        for (y, row) in rows.outer_iter().enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::data(format!(
                    "kernel row {y}: entries must be finite and nonnegative"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::data(format!("kernel row {y}: does not sum to 1")));
            }
            if 1.0 - row.iter().copied().fold(f64::NEG_INFINITY, f64::max) < 1e-12 {
                return Err(Error::data(format!(
                    "kernel row {y}: degenerate conditional (zero variance)"
                )));
            }
        }
        for y in 0..v {
            for z in (y + 1)..v {
                if (rows[[y, z]] - rows[[z, y]]).abs() > ROW_SUM_TOL {
                    return Err(Error::data(format!("kernel not symmetric at ({y},{z})")));
                }
            }
        }
        Ok(Self { rows })
    }

    pub fn size(&self) -> usize {
        self.rows.nrows()
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.rows[[from, to]]
    }

    pub fn row(&self, from: usize) -> Array1<f64> {
        self.rows.row(from).to_owned()
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }
}

/// Builds the stay/spread symmetric kernel: p(y|y) = `stay_prob` and the
/// remaining mass spread uniformly over the other V-1 responses. Symmetric
/// and doubly stochastic by construction.
pub fn make_symmetric_kernel(v: usize, stay_prob: f64) -> Result<PerturbationKernel> {
    if v < 2 {
        return Err(Error::config("kernel needs at least 2 responses"));
    }
    if !(stay_prob > 0.0 && stay_prob < 1.0) {
        return Err(Error::config(format!(
            "stay_prob must lie strictly in (0,1), got {stay_prob}"
        )));
    }
    let off = (1.0 - stay_prob) / (v as f64 - 1.0);
    let mut rows = Array2::from_elem((v, v), off);
    for y in 0..v {
        rows[[y, y]] = stay_prob;
    }
    PerturbationKernel::new(rows)
}

/// Draws a full-support policy by jittering reference logits with Gaussian
/// noise of the given scale. Shared by tests, certificates and studies.
pub fn perturbed_policy<R: Rng>(reference: &TabularPolicy, scale: f64, rng: &mut R) -> TabularPolicy {
    let mut logits = reference.logits().clone();
    for v in logits.iter_mut() {
        // Box-Muller keeps us off rand_distr for one gaussian.
        let u1: f64 = rng.gen::<f64>().max(1e-300);
        let u2: f64 = rng.gen::<f64>();
        *v += scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
    TabularPolicy::from_logits(logits).expect("finite jitter keeps logits valid")
}

/// Total variation distance between two probability rows.
pub fn total_variation(p: &Array1<f64>, q: &Array1<f64>) -> f64 {
    0.5 * p
        .iter()
        .zip(q.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
}

/// Mean over prompts of the total variation distance between two policies.
pub fn policy_total_variation(a: &TabularPolicy, b: &TabularPolicy) -> f64 {
    assert_eq!(a.n_prompts(), b.n_prompts());
    let mut acc = 0.0;
    for p in 0..a.n_prompts() {
        acc += total_variation(&a.prob_row(p), &b.prob_row(p));
    }
    acc / a.n_prompts() as f64
}
