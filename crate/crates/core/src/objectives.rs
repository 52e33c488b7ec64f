//! Exact objectives over the finite response space: the KL-regularized
//! policy objective and its closed-form minimizer, the Boltzmann preference
//! distribution and its cross-entropy, and the energy discrepancy with its
//! analytic gradient.
//!
//! Everything here is an oracle: each quantity is an exact finite sum (all
//! normalizers go through log-sum-exp), against which the sampled losses in
//! [`crate::losses`] are checked.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;
use crate::world::{PerturbationKernel, TabularPolicy, World};

/// The log-ratio reward row `beta * (log pi(y|x) - log pi_ref(y|x))` for one
/// prompt. Entries are exact up to floating point; a policy zero (`-inf`
/// logit) yields `-inf`.
pub fn log_ratio_reward(
    policy: &TabularPolicy,
    world: &World,
    beta: f64,
    prompt_id: usize,
) -> Result<Array1<f64>> {
    if !(beta > 0.0) {
        return Err(Error::config("beta must be > 0"));
    }
    if policy.n_prompts() != world.n_prompts() || policy.n_responses() != world.n_responses() {
        return Err(Error::shape("policy dimensions do not match world"));
    }
    let lp = policy.log_prob_row(prompt_id);
    let lr = world.reference.log_prob_row(prompt_id);
    Ok((lp - lr) * beta)
}

/// KL(p || q) = Σ p log(p/q) with the 0·log 0 = 0 convention; `+inf` when p
/// puts mass where q has none.
pub fn kl_divergence(p: &Array1<f64>, q: &Array1<f64>) -> f64 {
    assert_eq!(p.len(), q.len(), "kl_divergence: length mismatch");
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        acc += pi * (pi / qi).ln();
    }
    acc
}

/// The policy objective `-E_pi[r_true] + beta KL(pi || pi_ref)` for one
/// prompt, computed exactly over the vocabulary. Positive policy mass on an
/// out-of-support (`-inf` reward) response makes the value `+inf`.
pub fn rlhf_loss(policy: &TabularPolicy, world: &World, beta: f64, prompt_id: usize) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::config("beta must be > 0"));
    }
    let pi = policy.prob_row(prompt_id);
    let rewards = world.rewards.row(prompt_id);

    let mut expected = 0.0;
    for (&prob, &r) in pi.iter().zip(rewards.iter()) {
        if prob == 0.0 {
            continue;
        }
        if r == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        expected += prob * r;
    }
    let kl = kl_divergence(&pi, &world.reference.prob_row(prompt_id));
    Ok(-expected + beta * kl)
}

/// Log of the per-prompt normalizer `Z(x) = Σ_y pi_ref(y|x) exp(r_true/beta)`.
/// Crate-internal: the normalizer never appears in a public report, only
/// implicitly through the probe's intercept estimate.
pub(crate) fn log_partition(world: &World, beta: f64, prompt_id: usize) -> f64 {
    let lref = world.reference.log_prob_row(prompt_id);
    let rewards = world.rewards.row(prompt_id);
    let terms: Vec<f64> = lref
        .iter()
        .zip(rewards.iter())
        .map(|(&lr, &r)| lr + r / beta)
        .collect();
    log_sum_exp(&terms)
}

/// Closed-form minimizer of [`rlhf_loss`]: per prompt,
/// `pi(y) ∝ pi_ref(y) exp(r_true(y)/beta)`. Responses with `-inf` reward get
/// probability exactly 0 (a `-inf` logit). Errors when a row has no finite
/// reward at all.
pub fn analytic_rlhf_minimizer(world: &World, beta: f64) -> Result<TabularPolicy> {
    if !(beta > 0.0) {
        return Err(Error::config("beta must be > 0"));
    }
    let p = world.n_prompts();
    let v = world.n_responses();
    let mut logits = Array2::zeros((p, v));
    for prompt in 0..p {
        let lref = world.reference.log_prob_row(prompt);
        let rewards = world.rewards.row(prompt);
        let unnorm: Vec<f64> = lref
            .iter()
            .zip(rewards.iter())
            .map(|(&lr, &r)| lr + r / beta)
            .collect();
        let z = log_sum_exp(&unnorm);
        if z == f64::NEG_INFINITY {
            return Err(Error::data(format!("prompt {prompt}: empty reward support")));
        }
        for (y, &u) in unnorm.iter().enumerate() {
            logits[[prompt, y]] = u - z;
        }
    }
    TabularPolicy::from_logits(logits)
}

/// Boltzmann distribution induced by a reward row: softmax over the finite
/// entries with `-inf` entries mapped to exactly 0.
pub fn ipm_distribution(rewards: &Array1<f64>) -> Result<Array1<f64>> {
    let vals: Vec<f64> = rewards.to_vec();
    let z = log_sum_exp(&vals);
    if z == f64::NEG_INFINITY {
        return Err(Error::data("ipm_distribution: empty support"));
    }
    Ok(Array1::from_iter(vals.iter().map(|&r| (r - z).exp())))
}

/// Exact preference-model cross entropy for one prompt:
/// `-Σ_y p(y) log q(y)` with `p` the Boltzmann distribution of the true
/// rewards and `q` the one induced by the policy's log-ratio reward. Bounded
/// below by the entropy of `p`.
pub fn ipm_nll_exact(
    policy: &TabularPolicy,
    world: &World,
    beta: f64,
    prompt_id: usize,
) -> Result<f64> {
    let p = ipm_distribution(&world.rewards.row(prompt_id))?;
    let r_theta = log_ratio_reward(policy, world, beta, prompt_id)?;
    let z = log_sum_exp(&r_theta.to_vec());
    let mut acc = 0.0;
    for (&pi, &r) in p.iter().zip(r_theta.iter()) {
        if pi == 0.0 {
            continue;
        }
        let log_q = r - z;
        if log_q == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        acc -= pi * log_q;
    }
    Ok(acc)
}

/// Shannon entropy of a probability row (nats).
pub fn entropy(p: &Array1<f64>) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Exact energy discrepancy of a reward row under a perturbation kernel and
/// a target distribution:
///
/// ```text
/// ED(r) = Σ_y t(y) Σ_z p(z|y) · log Σ_y' p(z|y') exp(r(y') - r(y))
/// ```
///
/// evaluated as an exact triple sum with a log-sum-exp inner evaluation.
/// Invariant under constant reward shifts.
pub fn exact_energy_discrepancy(
    rewards: &Array1<f64>,
    kernel: &PerturbationKernel,
    target: &Array1<f64>,
) -> Result<f64> {
    let v = kernel.size();
    if rewards.len() != v || target.len() != v {
        return Err(Error::shape("rewards/target length must match kernel size"));
    }
    // lse[z] = log Σ_y' p(z|y') exp(r(y'))
    let lse = kernel_log_sums(rewards, kernel);

    let mut acc = 0.0;
    for y in 0..v {
        let ty = target[y];
        if ty == 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for (z, &lse_z) in lse.iter().enumerate() {
            let pzy = kernel.prob(y, z);
            if pzy == 0.0 {
                continue;
            }
            inner += pzy * (lse_z - rewards[y]);
        }
        acc += ty * inner;
    }
    Ok(acc)
}

/// Exact gradient of [`exact_energy_discrepancy`] with respect to each
/// reward entry:
///
/// ```text
/// ∂ED/∂r(a) = Σ_z m(z)·w(z,a) - t(a),   m(z) = Σ_y t(y) p(z|y),
///             w(z,a) = p(z|a) exp(r(a)) / Σ_y' p(z|y') exp(r(y'))
/// ```
///
/// the posterior-weighted expectation minus the target expectation. Entries
/// sum to 0 (shift invariance) and vanish identically when the target is the
/// Boltzmann distribution of `rewards`.
pub fn ed_gradient_exact(
    rewards: &Array1<f64>,
    kernel: &PerturbationKernel,
    target: &Array1<f64>,
) -> Result<Array1<f64>> {
    let v = kernel.size();
    if rewards.len() != v || target.len() != v {
        return Err(Error::shape("rewards/target length must match kernel size"));
    }
    let lse = kernel_log_sums(rewards, kernel);

    // m(z): target pushed through the kernel.
    let mut marginal = vec![0.0; v];
    for y in 0..v {
        let ty = target[y];
        if ty == 0.0 {
            continue;
        }
        for (z, m_z) in marginal.iter_mut().enumerate() {
            *m_z += ty * kernel.prob(y, z);
        }
    }

    let mut grad = Array1::zeros(v);
    for a in 0..v {
        let ra = rewards[a];
        let mut posterior_term = 0.0;
        if ra != f64::NEG_INFINITY {
            for (z, (&m_z, &lse_z)) in marginal.iter().zip(&lse).enumerate() {
                let pza = kernel.prob(a, z);
                if pza == 0.0 || m_z == 0.0 {
                    continue;
                }
                posterior_term += m_z * (pza.ln() + ra - lse_z).exp();
            }
        }
        grad[a] = posterior_term - target[a];
    }
    Ok(grad)
}

fn kernel_log_sums(rewards: &Array1<f64>, kernel: &PerturbationKernel) -> Vec<f64> {
    let v = kernel.size();
    (0..v)
        .map(|z| {
            let terms: Vec<f64> = (0..v)
                .map(|y| {
                    let p = kernel.prob(y, z);
                    if p == 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        p.ln() + rewards[y]
                    }
                })
                .collect();
            log_sum_exp(&terms)
        })
        .collect()
}
