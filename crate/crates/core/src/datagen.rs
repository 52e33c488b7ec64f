//! Synthetic worlds and preference datasets.
//!
//! Worlds carry a per-prompt "on-topic" subset with moderate rewards while
//! every other response sits at or below a weak floor, so that a response
//! borrowed from another prompt is almost surely a very poor answer here.
//! Datasets come from three schemes: best-of-K labeling over the on-topic
//! pool, an explicit pair distribution with ground-truth sigmoidal
//! orientation, and the degenerate variant of the explicit scheme that
//! never samples one designated response.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::io::world_hash;
use crate::numeric::{sample_weighted, sigmoid};
use crate::prefs::{Dataset, PreferenceRecord, SchemeInfo, WeakNegatives};
use crate::world::{ResponseVocab, RewardTable, TabularPolicy, World};

/// How preference records are drawn from a world.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplingScheme {
    /// Draw K candidates from the prompt's on-topic pool (reference
    /// proposal, without replacement), label the best true reward as the
    /// winner and keep the rest as strong negatives.
    BestOfK {
        k: usize,
        /// Candidate pool: responses with true reward at or above this
        /// threshold (`None` = the full finite-reward support).
        on_topic_min_reward: Option<f64>,
        /// Gumbel-noise temperature for soft winner labeling; `None` keeps
        /// the exact argmax.
        label_temperature: Option<f64>,
    },
    /// Draw ordered pairs from an explicit per-prompt V×V distribution and
    /// orient each by a ground-truth sigmoidal preference draw.
    ExplicitPairDist { pair_weights: Vec<Array2<f64>> },
    /// The explicit scheme restricted to pair distributions that never
    /// touch `y_star`.
    DegenerateAvoidYstar {
        pair_weights: Vec<Array2<f64>>,
        y_star: usize,
    },
}

impl SamplingScheme {
    pub fn best_of_k(k: usize) -> Self {
        SamplingScheme::BestOfK {
            k,
            on_topic_min_reward: None,
            label_temperature: None,
        }
    }

    /// Uniform pair distribution over ordered in-support pairs, one table
    /// per prompt, excluding the diagonal.
    pub fn explicit_uniform(world: &World) -> Result<Self> {
        Ok(SamplingScheme::ExplicitPairDist {
            pair_weights: uniform_pair_weights(world, None)?,
        })
    }

    /// Uniform pair distribution excluding every pair touching `y_star`.
    pub fn degenerate_uniform(world: &World, y_star: usize) -> Result<Self> {
        if y_star >= world.n_responses() {
            return Err(Error::config("y_star out of range"));
        }
        Ok(SamplingScheme::DegenerateAvoidYstar {
            pair_weights: uniform_pair_weights(world, Some(y_star))?,
            y_star,
        })
    }

    pub fn info(&self, n_strong: usize) -> SchemeInfo {
        match self {
            SamplingScheme::BestOfK { k, .. } => SchemeInfo::BestOfK { k: *k, n_strong },
            SamplingScheme::ExplicitPairDist { .. } => SchemeInfo::ExplicitPairDist,
            SamplingScheme::DegenerateAvoidYstar { y_star, .. } => {
                SchemeInfo::DegenerateAvoidYstar { y_star: *y_star }
            }
        }
    }

    fn validate(&self, world: &World) -> Result<()> {
        let v = world.n_responses();
        let check_tables = |tables: &Vec<Array2<f64>>, y_star: Option<usize>| -> Result<()> {
            if tables.len() != world.n_prompts() {
                return Err(Error::shape("pair_weights: one table per prompt required"));
            }
            for (p, t) in tables.iter().enumerate() {
                if t.nrows() != v || t.ncols() != v {
                    return Err(Error::shape(format!("pair_weights table {p} must be V×V")));
                }
                let mut mass = 0.0;
                for a in 0..v {
                    if t[[a, a]] != 0.0 {
                        return Err(Error::data(format!(
                            "pair_weights table {p}: diagonal must be zero"
                        )));
                    }
                    for b in 0..v {
                        let w = t[[a, b]];
                        if !(w >= 0.0) || !w.is_finite() {
                            return Err(Error::data(format!(
                                "pair_weights table {p}: negative or invalid entry"
                            )));
                        }
                        mass += w;
                    }
                }
                if (mass - 1.0).abs() > 1e-9 {
                    return Err(Error::data(format!(
                        "pair_weights table {p}: total mass {mass} is not 1"
                    )));
                }
                if let Some(star) = y_star {
                    for i in 0..v {
                        if t[[star, i]] != 0.0 || t[[i, star]] != 0.0 {
                            return Err(Error::data(format!(
                                "pair_weights table {p}: mass on y_star {star}"
                            )));
                        }
                    }
                }
            }
            Ok(())
        };
        match self {
            SamplingScheme::BestOfK { k, .. } => {
                if *k < 2 {
                    return Err(Error::config("best-of-k needs k >= 2"));
                }
                Ok(())
            }
            SamplingScheme::ExplicitPairDist { pair_weights } => check_tables(pair_weights, None),
            SamplingScheme::DegenerateAvoidYstar {
                pair_weights,
                y_star,
            } => check_tables(pair_weights, Some(*y_star)),
        }
    }
}

fn uniform_pair_weights(world: &World, y_star: Option<usize>) -> Result<Vec<Array2<f64>>> {
    let v = world.n_responses();
    let mut tables = Vec::with_capacity(world.n_prompts());
    for p in 0..world.n_prompts() {
        let support: Vec<usize> = world
            .rewards
            .support(p)
            .into_iter()
            .filter(|&y| Some(y) != y_star)
            .collect();
        if support.len() < 2 {
            return Err(Error::data(format!(
                "prompt {p}: not enough support to form pairs"
            )));
        }
        let n_pairs = (support.len() * (support.len() - 1)) as f64;
        let mut table = Array2::zeros((v, v));
        for &a in &support {
            for &b in &support {
                if a != b {
                    table[[a, b]] = 1.0 / n_pairs;
                }
            }
        }
        tables.push(table);
    }
    Ok(tables)
}

/// Builds a synthetic world: per prompt, a small on-topic subset with
/// rewards in `[-reward_spread, reward_spread]` and every other response at
/// or below `weak_floor`; the reference policy is a smoothed softmax of a
/// noisy copy of the rewards (full support). Deterministic per seed.
pub fn build_world(
    seed: u64,
    n_prompts: usize,
    n_responses: usize,
    reward_spread: f64,
    weak_floor: f64,
) -> Result<World> {
    if n_prompts < 1 {
        return Err(Error::config("need at least one prompt"));
    }
    if n_responses < 4 {
        return Err(Error::config("need at least four responses"));
    }
    if !(reward_spread > 0.0) {
        return Err(Error::config("reward_spread must be positive"));
    }
    if !(weak_floor < -reward_spread) {
        return Err(Error::config("weak_floor must lie below -reward_spread"));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let v = n_responses;
    let lengths: Vec<u32> = (0..v).map(|_| rng.gen_range(4..=64)).collect();
    let on_topic_count = (v / 4).max(4).min(v);

    let mut rewards = Array2::zeros((n_prompts, v));
    for p in 0..n_prompts {
        let mut ids: Vec<usize> = (0..v).collect();
        ids.shuffle(&mut rng);
        let on_topic = &ids[..on_topic_count];
        for y in 0..v {
            rewards[[p, y]] = if on_topic.contains(&y) {
                rng.gen_range(-reward_spread..=reward_spread)
            } else {
                weak_floor - reward_spread * rng.gen::<f64>()
            };
        }
    }

    // Reference: noisy rewards rescaled so each row spans ~4 nats of logit
    // range, keeping every response clearly inside the support.
    let mut reference = Array2::zeros((n_prompts, v));
    for p in 0..n_prompts {
        let noisy: Vec<f64> = (0..v)
            .map(|y| rewards[[p, y]] + 0.25 * reward_spread * gaussian(&mut rng))
            .collect();
        let lo = noisy.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = noisy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scale = if hi > lo { 4.0 / (hi - lo) } else { 0.0 };
        for y in 0..v {
            reference[[p, y]] = (noisy[y] - lo) * scale;
        }
    }

    World::new(
        ResponseVocab::new(lengths)?,
        RewardTable::new(rewards)?,
        TabularPolicy::from_logits(reference)?,
        seed,
    )
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Draws a preference dataset from a world under a sampling scheme.
///
/// Best-of-K records carry the argmax winner and the `n_strong` best
/// remaining candidates (ordered by decreasing true reward, so a record
/// doubles as a ranking). Pair schemes emit pairwise records whose
/// orientation follows a ground-truth sigmoidal preference draw.
pub fn sample_preferences(
    world: &World,
    scheme: &SamplingScheme,
    n_records: usize,
    n_strong: usize,
    seed: u64,
) -> Result<Dataset> {
    scheme.validate(world)?;
    if n_records == 0 {
        return Err(Error::config("n_records must be positive"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_records);

    match scheme {
        SamplingScheme::BestOfK {
            k,
            on_topic_min_reward,
            label_temperature,
        } => {
            if n_strong > k - 1 {
                return Err(Error::config("best-of-k: n_strong must be <= k - 1"));
            }
            for _ in 0..n_records {
                let prompt = rng.gen_range(0..world.n_prompts());
                records.push(draw_best_of_k(
                    world,
                    prompt,
                    *k,
                    n_strong,
                    *on_topic_min_reward,
                    *label_temperature,
                    &mut rng,
                )?);
            }
        }
        SamplingScheme::ExplicitPairDist { pair_weights }
        | SamplingScheme::DegenerateAvoidYstar { pair_weights, .. } => {
            if n_strong != 1 {
                return Err(Error::config("pair schemes produce exactly 1 strong negative"));
            }
            for _ in 0..n_records {
                let prompt = rng.gen_range(0..world.n_prompts());
                records.push(draw_pair(world, prompt, &pair_weights[prompt], &mut rng));
            }
        }
    }

    Ok(Dataset {
        world_hash: world_hash(world),
        scheme: scheme.info(n_strong),
        seed,
        records,
    })
}

fn draw_best_of_k(
    world: &World,
    prompt: usize,
    k: usize,
    n_strong: usize,
    min_reward: Option<f64>,
    label_temperature: Option<f64>,
    rng: &mut ChaCha12Rng,
) -> Result<PreferenceRecord> {
    let floor = min_reward.unwrap_or(f64::NEG_INFINITY);
    let pool: Vec<usize> = world
        .rewards
        .support(prompt)
        .into_iter()
        .filter(|&y| world.rewards.get(prompt, y) >= floor)
        .collect();
    if pool.len() < k {
        return Err(Error::config(format!(
            "prompt {prompt}: on-topic pool ({}) smaller than k ({k})",
            pool.len()
        )));
    }

    // Reference proposal restricted to the pool, renormalized, without
    // replacement.
    let ref_probs = world.reference.prob_row(prompt);
    let mut remaining = pool;
    let mut candidates = Vec::with_capacity(k);
    for _ in 0..k {
        let weights: Vec<f64> = remaining.iter().map(|&y| ref_probs[y]).collect();
        let pick = sample_weighted(rng, &weights);
        candidates.push(remaining.swap_remove(pick));
    }

    let score = |y: usize| world.rewards.get(prompt, y);
    let winner = match label_temperature {
        None => {
            // Exact argmax, ties broken by the lowest id.
            *candidates
                .iter()
                .max_by(|&&a, &&b| {
                    score(a)
                        .partial_cmp(&score(b))
                        .unwrap()
                        .then(b.cmp(&a))
                })
                .unwrap()
        }
        Some(temp) => {
            let noisy: Vec<f64> = candidates
                .iter()
                .map(|&y| score(y) / temp + gumbel(rng))
                .collect();
            let best = noisy
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            candidates[best]
        }
    };

    let mut strong: Vec<usize> = candidates.into_iter().filter(|&y| y != winner).collect();
    strong.sort_by(|&a, &b| score(b).partial_cmp(&score(a)).unwrap().then(a.cmp(&b)));
    strong.truncate(n_strong);

    Ok(PreferenceRecord {
        prompt_id: prompt,
        winner_id: winner,
        strong_ids: strong,
        weak: WeakNegatives::none(),
    })
}

fn gumbel<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen::<f64>().max(1e-300);
    -(-u.ln()).ln()
}

fn draw_pair(
    world: &World,
    prompt: usize,
    table: &Array2<f64>,
    rng: &mut ChaCha12Rng,
) -> PreferenceRecord {
    let v = world.n_responses();
    let flat: Vec<f64> = table.iter().copied().collect();
    let idx = sample_weighted(rng, &flat);
    let (a, b) = (idx / v, idx % v);
    // Orient by a ground-truth preference draw.
    let p_a_wins = sigmoid(world.rewards.get(prompt, a) - world.rewards.get(prompt, b));
    let (winner, loser) = if rng.gen::<f64>() < p_a_wins {
        (a, b)
    } else {
        (b, a)
    };
    PreferenceRecord::pairwise(prompt, winner, loser)
}

/// Where attached weak negatives come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeakAttachMode {
    /// Draw and store `n_weak` ids per record now, each taken from the
    /// winner/strong set of a record with a different prompt.
    Precomputed,
    /// Only record the count; batch assembly draws from the live batch.
    InBatchMarker,
}

/// Attaches weak negatives to every record of a dataset.
pub fn attach_weak_negatives(
    dataset: &Dataset,
    world: &World,
    n_weak: usize,
    mode: WeakAttachMode,
    seed: u64,
) -> Result<Dataset> {
    crate::io::check_dataset_world(dataset, world)?;
    let mut out = dataset.clone();
    match mode {
        WeakAttachMode::InBatchMarker => {
            for record in &mut out.records {
                record.weak = WeakNegatives::InBatch(n_weak);
            }
        }
        WeakAttachMode::Precomputed => {
            if n_weak == 0 {
                return Err(Error::config("precomputed attachment needs n_weak >= 1"));
            }
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            for i in 0..out.records.len() {
                let donors: Vec<usize> = (0..out.records.len())
                    .filter(|&j| out.records[j].prompt_id != out.records[i].prompt_id)
                    .collect();
                if donors.is_empty() {
                    return Err(Error::data(
                        "weak attachment needs records from at least two prompts",
                    ));
                }
                let winner = out.records[i].winner_id;
                let mut ids = Vec::with_capacity(n_weak);
                for _ in 0..n_weak {
                    let mut id = None;
                    for _ in 0..100 {
                        let donor = &out.records[donors[rng.gen_range(0..donors.len())]];
                        let pool_len = 1 + donor.strong_ids.len();
                        let pick = rng.gen_range(0..pool_len);
                        let candidate = if pick == 0 {
                            donor.winner_id
                        } else {
                            donor.strong_ids[pick - 1]
                        };
                        if candidate != winner {
                            id = Some(candidate);
                            break;
                        }
                    }
                    ids.push(id.ok_or_else(|| {
                        Error::data("could not draw a weak negative distinct from the winner")
                    })?);
                }
                out.records[i].weak = WeakNegatives::Ids(ids);
            }
        }
    }
    Ok(out)
}

/// The likelihood-preserving reward transform: shifts every reward by a
/// negative constant `a` and compensates on `y_star` so that the log-ratio
/// constraint `Σ ref·exp(r) = 1` still holds:
///
/// ```text
/// r~(y_star) = log( exp(r(y_star) + a) + (1 - exp(a)) / ref(y_star) )
/// r~(y)      = r(y) + a                 otherwise
/// ```
///
/// Every pairwise gap away from `y_star` is exactly preserved, so any
/// pair-sampling distribution that never touches `y_star` cannot tell the
/// two rewards apart, while the induced policies differ.
pub fn btm_degenerate_transform(
    reward_row: &Array1<f64>,
    ref_row: &Array1<f64>,
    y_star: usize,
    a: f64,
) -> Result<Array1<f64>> {
    if !(a < 0.0) {
        return Err(Error::config("the shift constant must be negative"));
    }
    if reward_row.len() != ref_row.len() {
        return Err(Error::shape("reward and reference rows must match"));
    }
    if y_star >= reward_row.len() {
        return Err(Error::config("y_star out of range"));
    }
    if !(ref_row[y_star] > 0.0) {
        return Err(Error::data("reference must put positive mass on y_star"));
    }
    let constraint: f64 = reward_row
        .iter()
        .zip(ref_row.iter())
        .map(|(&r, &f)| f * r.exp())
        .sum();
    if (constraint - 1.0).abs() > 1e-9 {
        return Err(Error::data(format!(
            "input violates the log-ratio constraint: sum ref·exp(r) = {constraint}"
        )));
    }

    let mut out = reward_row.mapv(|r| r + a);
    out[y_star] = ((reward_row[y_star] + a).exp() + (1.0 - a.exp()) / ref_row[y_star]).ln();
    Ok(out)
}
