//! Evaluation instruments: the slope-1 linearity probe, the KL-reward
//! frontier, an exact likelihood-degeneracy certificate, the energy
//! discrepancy stationarity check and the estimator convergence study.
//!
//! Reports serialize to JSON (serde) and export as CSV with documented
//! headers; everything is exact at tabular scale, no sampled evaluation.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::config::LossConfig;
use crate::datagen::{btm_degenerate_transform, SamplingScheme};
use crate::error::{Error, Result};
use crate::losses::ed_statistic;
use crate::numeric::{derive_seed, log_sigmoid, pearson, sample_weighted, sigmoid};
use crate::objectives::{
    ed_gradient_exact, exact_energy_discrepancy, ipm_distribution, kl_divergence,
    log_ratio_reward, rlhf_loss,
};
use crate::prefs::Dataset;
use crate::trainer::{train, TrainConfig, Trajectory};
use crate::world::{total_variation, PerturbationKernel, TabularPolicy, World};

/// Which responses the linearity probe evaluates per prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeSelection {
    /// Every response with finite true reward (exactness is available at
    /// tabular scale, so this is the default).
    AllSupport,
    /// The `k` best responses by true reward, mirroring probes that only
    /// see a handful of sampled responses per prompt.
    Count(usize),
}

/// Per-prompt slope-1 regression diagnostics: the analytic intercept
/// `b_hat = mean(r_learned - r_true)`, the residual
/// `eps_hat = Σ (r_true - r_learned + b_hat)²` at that intercept, and the
/// Pearson correlation of the two reward vectors (`None` when degenerate).
#[derive(Debug, Clone, Serialize)]
pub struct PromptProbe {
    pub prompt_id: usize,
    pub pearson: Option<f64>,
    pub b_hat: f64,
    pub eps_hat: f64,
    pub n_responses: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub per_prompt: Vec<PromptProbe>,
    /// Mean over prompts with a defined coefficient.
    pub mean_pearson: Option<f64>,
    pub mean_eps_hat: f64,
}

/// Fits the slope-1 regression `r_learned = r_true + b` per prompt and
/// reports the optimal intercept, its residual and the Pearson coefficient.
pub fn slope1_probe(
    policy: &TabularPolicy,
    world: &World,
    beta: f64,
    selection: ProbeSelection,
) -> Result<ProbeReport> {
    let mut per_prompt = Vec::with_capacity(world.n_prompts());
    for prompt in 0..world.n_prompts() {
        let mut ids = world.rewards.support(prompt);
        if let ProbeSelection::Count(k) = selection {
            if k > ids.len() {
                return Err(Error::config(format!(
                    "probe: prompt {prompt} has only {} responses in support",
                    ids.len()
                )));
            }
            ids.sort_by(|&a, &b| {
                world
                    .rewards
                    .get(prompt, b)
                    .partial_cmp(&world.rewards.get(prompt, a))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            ids.truncate(k);
        }
        if ids.len() < 2 {
            return Err(Error::config(format!(
                "probe: prompt {prompt} needs at least 2 evaluated responses"
            )));
        }

        let learned_row = log_ratio_reward(policy, world, beta, prompt)?;
        let truth: Vec<f64> = ids.iter().map(|&y| world.rewards.get(prompt, y)).collect();
        let learned: Vec<f64> = ids.iter().map(|&y| learned_row[y]).collect();

        let k = ids.len() as f64;
        let b_hat = learned
            .iter()
            .zip(&truth)
            .map(|(l, t)| l - t)
            .sum::<f64>()
            / k;
        let eps_hat = learned
            .iter()
            .zip(&truth)
            .map(|(l, t)| {
                let r = t - l + b_hat;
                r * r
            })
            .sum::<f64>();
        per_prompt.push(PromptProbe {
            prompt_id: prompt,
            pearson: pearson(&truth, &learned),
            b_hat,
            eps_hat,
            n_responses: ids.len(),
        });
    }

    let defined: Vec<f64> = per_prompt.iter().filter_map(|p| p.pearson).collect();
    let mean_pearson = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    let mean_eps_hat =
        per_prompt.iter().map(|p| p.eps_hat).sum::<f64>() / per_prompt.len() as f64;
    Ok(ProbeReport {
        per_prompt,
        mean_pearson,
        mean_eps_hat,
    })
}

/// One point of the KL-reward frontier.
#[derive(Debug, Clone, Serialize)]
pub struct FrontierPoint {
    pub method: String,
    pub beta: f64,
    pub kl: f64,
    pub expected_true_reward: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrontierReport {
    pub points: Vec<FrontierPoint>,
    /// Betas whose training run failed, with the error message. A partial
    /// frontier is returned rather than failing the study.
    pub failures: Vec<(f64, String)>,
}

/// Exact mean-over-prompts KL to the reference and expected true reward of
/// a policy (both closed-form sums, no sampling).
pub fn policy_kl_and_reward(policy: &TabularPolicy, world: &World) -> (f64, f64) {
    let p = world.n_prompts();
    let mut kl_acc = 0.0;
    let mut reward_acc = 0.0;
    for prompt in 0..p {
        let pi = policy.prob_row(prompt);
        kl_acc += kl_divergence(&pi, &world.reference.prob_row(prompt));
        reward_acc += pi
            .iter()
            .zip(world.rewards.row(prompt).iter())
            .filter(|(&prob, _)| prob > 0.0)
            .map(|(&prob, &r)| prob * r)
            .sum::<f64>();
    }
    (kl_acc / p as f64, reward_acc / p as f64)
}

/// Trains one fresh policy per beta and records the exact (KL, reward)
/// trade-off point for each.
pub fn kl_reward_frontier(
    world: &World,
    dataset: &Dataset,
    template: &LossConfig,
    beta_list: &[f64],
    train_config: &TrainConfig,
) -> Result<FrontierReport> {
    if beta_list.is_empty() {
        return Err(Error::config("frontier needs at least one beta"));
    }
    if beta_list.iter().any(|b| !(*b > 0.0)) {
        return Err(Error::config("frontier betas must be positive"));
    }
    let mut points = Vec::new();
    let mut failures = Vec::new();
    for &beta in beta_list {
        let mut config = template.clone();
        config.beta = beta;
        match train(world, dataset, &config, train_config) {
            Ok((policy, _)) => {
                let (kl, reward) = policy_kl_and_reward(&policy, world);
                points.push(FrontierPoint {
                    method: config.variant.name().to_string(),
                    beta,
                    kl,
                    expected_true_reward: reward,
                });
            }
            Err(e) => failures.push((beta, e.to_string())),
        }
    }
    Ok(FrontierReport { points, failures })
}

/// Exact expected pairwise sigmoid log-likelihood loss of a candidate
/// reward row under an explicit pair distribution, with the preference
/// label drawn from the ground-truth sigmoidal model:
///
/// ```text
/// -Σ_(a,b) pw(a,b) [ σ(rt(a)-rt(b)) log σ(r(a)-r(b))
///                  + σ(rt(b)-rt(a)) log σ(r(b)-r(a)) ]
/// ```
pub fn expected_bt_nll(
    pair_weights: &Array2<f64>,
    true_rewards: &Array1<f64>,
    rewards: &Array1<f64>,
) -> f64 {
    let v = true_rewards.len();
    let mut acc = 0.0;
    for a in 0..v {
        for b in 0..v {
            let w = pair_weights[[a, b]];
            if w == 0.0 {
                continue;
            }
            let p_a = sigmoid(true_rewards[a] - true_rewards[b]);
            let gap = rewards[a] - rewards[b];
            acc -= w * (p_a * log_sigmoid(gap) + (1.0 - p_a) * log_sigmoid(-gap));
        }
    }
    acc
}

/// Per-prompt outcome of the degeneracy certificate.
#[derive(Debug, Clone, Serialize)]
pub struct DegeneracyPrompt {
    pub prompt_id: usize,
    /// |expected pairwise log-likelihood(r) - same(r~)|, exact over pairs.
    pub likelihood_gap: f64,
    /// Total-variation distance between the two induced policies.
    pub policy_tv: f64,
    /// |policy objective(π) - policy objective(π~)| at beta = 1.
    pub rlhf_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DegeneracyReport {
    pub per_prompt: Vec<DegeneracyPrompt>,
    pub max_likelihood_gap: f64,
    pub min_policy_tv: f64,
    pub min_rlhf_gap: f64,
    pub pass: bool,
}

pub const DEGENERACY_LIKELIHOOD_TOL: f64 = 1e-10;
pub const DEGENERACY_TV_MIN: f64 = 1e-3;
pub const DEGENERACY_RLHF_MIN: f64 = 1e-3;

/// Certifies that the pairwise likelihood cannot identify the reward when a
/// response is never sampled: the shifted reward `r~` built by
/// [`btm_degenerate_transform`] attains expected pairwise log-likelihood
/// identical to the base reward (gap < 1e-10) while inducing a genuinely
/// different policy (TV > 1e-3) with a different policy objective
/// (gap > 1e-3).
pub fn degeneracy_certificate(
    world: &World,
    scheme: &SamplingScheme,
    base_policy: &TabularPolicy,
    shift: f64,
) -> Result<DegeneracyReport> {
    let (pair_weights, y_star) = match scheme {
        SamplingScheme::DegenerateAvoidYstar {
            pair_weights,
            y_star,
        } => (pair_weights, *y_star),
        _ => {
            return Err(Error::config(
                "degeneracy certificate needs a degenerate sampling scheme",
            ))
        }
    };
    if pair_weights.len() != world.n_prompts() {
        return Err(Error::shape("one pair table per prompt required"));
    }

    let mut per_prompt = Vec::new();
    for (prompt, pair_table) in pair_weights.iter().enumerate() {
        let ref_probs = world.reference.prob_row(prompt);
        // The base log-ratio reward row (unit temperature); valid by
        // construction: Σ ref exp(r) = Σ π = 1.
        let base_probs = base_policy.prob_row(prompt);
        let base_rewards = Array1::from_iter(
            base_probs
                .iter()
                .zip(ref_probs.iter())
                .map(|(&pi, &f)| pi.ln() - f.ln()),
        );
        let shifted = btm_degenerate_transform(&base_rewards, &ref_probs, y_star, shift)?;

        let truth = world.rewards.row(prompt);
        let likelihood_gap = (expected_bt_nll(pair_table, &truth, &base_rewards)
            - expected_bt_nll(pair_table, &truth, &shifted))
        .abs();

        let shifted_probs = Array1::from_iter(
            shifted
                .iter()
                .zip(ref_probs.iter())
                .map(|(&r, &f)| f * r.exp()),
        );
        let policy_tv = total_variation(&base_probs, &shifted_probs);

        let shifted_policy = induced_policy(world, prompt, &shifted_probs)?;
        let base_single = induced_policy(world, prompt, &base_probs)?;
        let rlhf_gap = (rlhf_loss(&base_single, world, 1.0, prompt)?
            - rlhf_loss(&shifted_policy, world, 1.0, prompt)?)
        .abs();

        per_prompt.push(DegeneracyPrompt {
            prompt_id: prompt,
            likelihood_gap,
            policy_tv,
            rlhf_gap,
        });
    }

    let max_likelihood_gap = per_prompt
        .iter()
        .map(|p| p.likelihood_gap)
        .fold(0.0, f64::max);
    let min_policy_tv = per_prompt
        .iter()
        .map(|p| p.policy_tv)
        .fold(f64::INFINITY, f64::min);
    let min_rlhf_gap = per_prompt
        .iter()
        .map(|p| p.rlhf_gap)
        .fold(f64::INFINITY, f64::min);
    let pass = max_likelihood_gap < DEGENERACY_LIKELIHOOD_TOL
        && min_policy_tv > DEGENERACY_TV_MIN
        && min_rlhf_gap > DEGENERACY_RLHF_MIN;

    Ok(DegeneracyReport {
        per_prompt,
        max_likelihood_gap,
        min_policy_tv,
        min_rlhf_gap,
        pass,
    })
}

/// Wraps one probability row into a single-prompt-compatible policy matrix
/// so the exact objectives can evaluate it. Rows for other prompts are the
/// reference.
fn induced_policy(world: &World, prompt: usize, probs: &Array1<f64>) -> Result<TabularPolicy> {
    let mut logits = world.reference.logits().clone();
    for (y, &p) in probs.iter().enumerate() {
        logits[[prompt, y]] = if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
    }
    TabularPolicy::from_logits(logits)
}

#[derive(Debug, Clone, Serialize)]
pub struct EdStationarityReport {
    pub grad_max_norm: f64,
    /// Minimum of ED(r+δ) - ED(r) over the random mean-zero perturbations.
    pub min_perturbation_gap: f64,
    pub n_perturbations: usize,
    /// |ED(r + c·1) - ED(r)|: the flat (shift) direction.
    pub shift_gap: f64,
}

/// Checks first-order stationarity and second-order positivity of the
/// energy discrepancy at the true rewards: the exact gradient vanishes when
/// the target is the Boltzmann distribution of the rewards themselves, every
/// mean-zero perturbation of norm 0.1 increases the value, and the all-ones
/// shift direction stays flat.
pub fn ed_stationarity_check(
    world: &World,
    kernel: &PerturbationKernel,
    prompt_id: usize,
    n_perturbations: usize,
    seed: u64,
) -> Result<EdStationarityReport> {
    let rewards = world.rewards.row(prompt_id);
    let target = ipm_distribution(&rewards)?;
    let grad = ed_gradient_exact(&rewards, kernel, &target)?;
    let grad_max_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));

    let support: Vec<usize> = world.rewards.support(prompt_id);
    let base = exact_energy_discrepancy(&rewards, kernel, &target)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut min_gap = f64::INFINITY;
    for _ in 0..n_perturbations {
        let mut delta = vec![0.0; rewards.len()];
        let mut mean = 0.0;
        for &y in &support {
            let g: f64 = rng.gen::<f64>() - 0.5;
            delta[y] = g;
            mean += g;
        }
        mean /= support.len() as f64;
        let mut norm = 0.0;
        for &y in &support {
            delta[y] -= mean;
            norm += delta[y] * delta[y];
        }
        let norm = norm.sqrt();
        let perturbed = Array1::from_iter(
            rewards
                .iter()
                .enumerate()
                .map(|(y, &r)| r + delta[y] / norm * 0.1),
        );
        let gap = exact_energy_discrepancy(&perturbed, kernel, &target)? - base;
        min_gap = min_gap.min(gap);
    }

    let shifted = rewards.mapv(|r| r + 0.5);
    let shift_gap = (exact_energy_discrepancy(&shifted, kernel, &target)? - base).abs();

    Ok(EdStationarityReport {
        grad_max_norm,
        min_perturbation_gap: min_gap,
        n_perturbations,
        shift_gap,
    })
}

/// One matched-KL comparison row: the first frontier's reward against the
/// second's, linearly interpolated at the same KL.
#[derive(Debug, Clone, Serialize)]
pub struct MatchedKlPoint {
    pub kl: f64,
    pub reward_a: f64,
    pub reward_b_interpolated: f64,
    pub advantage_a: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DominanceReport {
    pub method_a: String,
    pub method_b: String,
    pub points: Vec<MatchedKlPoint>,
    pub mean_advantage_a: f64,
}

/// Compares two frontiers at matched KL: for each point of `a` whose KL
/// falls inside `b`'s KL range, `b`'s reward is linearly interpolated
/// between its adjacent points. Reports the direction; makes no claim.
pub fn frontier_dominance(a: &[FrontierPoint], b: &[FrontierPoint]) -> Result<DominanceReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::config("dominance comparison needs nonempty frontiers"));
    }
    let mut b_sorted: Vec<&FrontierPoint> = b.iter().collect();
    b_sorted.sort_by(|x, y| x.kl.partial_cmp(&y.kl).unwrap());

    let mut points = Vec::new();
    for pa in a {
        let kl = pa.kl;
        if kl < b_sorted.first().unwrap().kl || kl > b_sorted.last().unwrap().kl {
            continue;
        }
        let idx = b_sorted.partition_point(|p| p.kl < kl).min(b_sorted.len() - 1);
        let (lo, hi) = if idx == 0 {
            (b_sorted[0], b_sorted[0])
        } else {
            (b_sorted[idx - 1], b_sorted[idx])
        };
        let interpolated = if hi.kl > lo.kl {
            let t = (kl - lo.kl) / (hi.kl - lo.kl);
            lo.expected_true_reward + t * (hi.expected_true_reward - lo.expected_true_reward)
        } else {
            lo.expected_true_reward
        };
        points.push(MatchedKlPoint {
            kl,
            reward_a: pa.expected_true_reward,
            reward_b_interpolated: interpolated,
            advantage_a: pa.expected_true_reward - interpolated,
        });
    }
    let mean = if points.is_empty() {
        0.0
    } else {
        points.iter().map(|p| p.advantage_a).sum::<f64>() / points.len() as f64
    };
    Ok(DominanceReport {
        method_a: a[0].method.clone(),
        method_b: b[0].method.clone(),
        points,
        mean_advantage_a: mean,
    })
}

/// One row of the estimator convergence study.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub m: usize,
    pub mean_abs_error: f64,
    pub std_error: f64,
}

/// Measures |sampled statistic - exact energy discrepancy| as the negative
/// count grows: for each M, positives are drawn from the Boltzmann
/// distribution of the true rewards and the statistic is compared against
/// the exact value of the policy's log-ratio reward row.
#[allow(clippy::too_many_arguments)]
pub fn estimator_convergence_study(
    world: &World,
    kernel: &PerturbationKernel,
    policy: &TabularPolicy,
    beta: f64,
    prompt_id: usize,
    m_list: &[usize],
    n_seeds: usize,
    n_positives: usize,
    seed: u64,
) -> Result<Vec<ConvergenceRow>> {
    if m_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("m_list must be strictly increasing"));
    }
    if n_seeds < 10 {
        return Err(Error::config("study needs at least 10 seeds"));
    }
    if n_positives < 1 {
        return Err(Error::config("study needs at least 1 positive per draw"));
    }

    let rewards = log_ratio_reward(policy, world, beta, prompt_id)?;
    let target = ipm_distribution(&world.rewards.row(prompt_id))?;
    let exact = exact_energy_discrepancy(&rewards, kernel, &target)?;
    let target_weights = target.to_vec();

    let mut rows = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let mut errors = Vec::with_capacity(n_seeds);
        for s in 0..n_seeds {
            let draw_seed = derive_seed(seed, (m as u64) << 32 | s as u64);
            let mut rng = ChaCha12Rng::seed_from_u64(draw_seed);
            let positives: Vec<usize> = (0..n_positives)
                .map(|_| sample_weighted(&mut rng, &target_weights))
                .collect();
            let stat = ed_statistic(
                world,
                kernel,
                policy,
                beta,
                prompt_id,
                &positives,
                m,
                derive_seed(draw_seed, 1),
            )?;
            errors.push((stat - exact).abs());
        }
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>()
            / (errors.len() - 1) as f64;
        rows.push(ConvergenceRow {
            m,
            mean_abs_error: mean,
            std_error: (var / errors.len() as f64).sqrt(),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// CSV export
// ---------------------------------------------------------------------------

/// Formats a trajectory as CSV. Probe and exact-objective columns are
/// filled on checkpoint rows (where a snapshot exists) and left empty
/// elsewhere.
///
/// Header: `step,loss,probe_pearson,probe_eps_hat,kl_to_ref,exp_true_reward`.
pub fn trajectory_csv(
    world: &World,
    beta: f64,
    trajectory: &Trajectory,
    digest: &str,
) -> Result<String> {
    let mut out = format!("# config_digest={digest}\n");
    out.push_str("step,loss,probe_pearson,probe_eps_hat,kl_to_ref,exp_true_reward\n");
    for point in &trajectory.points {
        match &point.snapshot {
            Some(snapshot) => {
                let probe = slope1_probe(snapshot, world, beta, ProbeSelection::AllSupport)?;
                let (kl, reward) = policy_kl_and_reward(snapshot, world);
                let pearson = probe
                    .mean_pearson
                    .map(|p| p.to_string())
                    .unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    point.step, point.loss, pearson, probe.mean_eps_hat, kl, reward
                ));
            }
            None => out.push_str(&format!("{},{},,,,\n", point.step, point.loss)),
        }
    }
    Ok(out)
}

/// Formats frontier points as CSV with header `method,beta,kl,reward`.
pub fn frontier_csv(points: &[FrontierPoint], digest: &str) -> String {
    let mut out = format!("# config_digest={digest}\n");
    out.push_str("method,beta,kl,reward\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.method, p.beta, p.kl, p.expected_true_reward
        ));
    }
    out
}
