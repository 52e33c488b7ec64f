//! Gradient-descent training of tabular policies.
//!
//! The trainer owns nothing clever: it shuffles the dataset into epochs,
//! resolves in-batch weak negatives per step, applies the analytic gradient
//! of the configured loss and steps SGD or an Adam-style optimizer. Policies
//! are always initialized at the reference logits, so training starts from a
//! zero log-ratio reward everywhere. Everything is reproducible: the per-step
//! batch assembly and negative draws derive from the run seed, and identical
//! configs produce bit-identical trajectories.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::losses::{assemble_batch, batch_loss_and_gradient};
use crate::numeric::derive_seed;
use crate::objectives::{ipm_distribution, log_ratio_reward};
use crate::prefs::Dataset;
use crate::world::{TabularPolicy, World};

/// Optimizer selection. Adam-style is the default at tabular scale; plain
/// SGD is kept for monotonicity arguments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    AdamLike { b1: f64, b2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam_default() -> Self {
        Optimizer::AdamLike {
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub checkpoint_every: usize,
    /// When set, every 100th step re-checks the analytic gradient against
    /// central finite differences on a few sampled entries and fails the
    /// run on disagreement.
    pub audit_gradients: bool,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, steps: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            learning_rate,
            steps,
            batch_size,
            seed,
            optimizer: Optimizer::adam_default(),
            checkpoint_every: 100,
            audit_gradients: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be positive"));
        }
        Ok(())
    }
}

/// One recorded training step: the batch loss before the update and,
/// at checkpoint cadence, a snapshot of the policy after it.
#[derive(Debug, Clone)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub loss: f64,
    pub snapshot: Option<TabularPolicy>,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

struct OptimizerState {
    kind: Optimizer,
    m: Array2<f64>,
    v: Array2<f64>,
    t: u64,
}

impl OptimizerState {
    fn new(kind: Optimizer, shape: (usize, usize)) -> Self {
        Self {
            kind,
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            t: 0,
        }
    }

    fn step(&mut self, logits: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) {
        match self.kind {
            Optimizer::Sgd => {
                logits.zip_mut_with(grad, |x, &g| *x -= lr * g);
            }
            Optimizer::AdamLike { b1, b2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - b1.powi(self.t as i32);
                let bc2 = 1.0 - b2.powi(self.t as i32);
                for ((x, &g), (m, v)) in logits
                    .iter_mut()
                    .zip(grad.iter())
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *x -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// Trains a fresh policy (initialized at the reference) against the
/// configured loss over the dataset. Batches are drawn without replacement
/// per epoch with reshuffling; in-batch weak negatives are resolved at
/// assembly time. Returns the final policy and the step trajectory.
pub fn train(
    world: &World,
    dataset: &Dataset,
    loss_config: &LossConfig,
    train_config: &TrainConfig,
) -> Result<(TabularPolicy, Trajectory)> {
    train_config.validate()?;
    if train_config.batch_size > dataset.len() {
        return Err(Error::config("batch_size exceeds dataset size"));
    }
    dataset.validate(world)?;
    loss_config.validate_against(dataset, train_config.batch_size)?;

    let mut policy = world.reference.clone();
    let mut trajectory = Trajectory::default();
    let mut optimizer = OptimizerState::new(
        train_config.optimizer,
        (world.n_prompts(), world.n_responses()),
    );

    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(derive_seed(train_config.seed, 1));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;

    for step in 1..=train_config.steps {
        if cursor + train_config.batch_size > order.len() {
            order = (0..dataset.len()).collect();
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }
        let picked: Vec<_> = order[cursor..cursor + train_config.batch_size]
            .iter()
            .map(|&i| dataset.records[i].clone())
            .collect();
        cursor += train_config.batch_size;

        let step_seed = derive_seed(train_config.seed, 2 + step as u64);
        let batch = assemble_batch(&picked, loss_config, step_seed)?;
        let (value, grad) =
            batch_loss_and_gradient(&batch, &policy, world, loss_config, step_seed)?;

        if train_config.audit_gradients && step % 100 == 1 {
            audit_gradient(&batch, &policy, world, loss_config, step_seed, &grad)?;
        }

        optimizer.step(policy.logits_mut(), &grad, train_config.learning_rate);

        let snapshot = (step % train_config.checkpoint_every == 0 || step == train_config.steps)
            .then(|| policy.clone());
        trajectory.points.push(TrajectoryPoint {
            step,
            loss: value.loss,
            snapshot,
        });
    }

    Ok((policy, trajectory))
}

/// Spot-checks the analytic gradient against central finite differences on
/// a handful of entries touched by the batch.
fn audit_gradient(
    batch: &crate::losses::Batch,
    policy: &TabularPolicy,
    world: &World,
    loss_config: &LossConfig,
    step_seed: u64,
    grad: &Array2<f64>,
) -> Result<()> {
    let mut entries = Vec::new();
    for record in batch.records.iter().take(2) {
        entries.push((record.prompt_id, record.winner_id));
        if let Some(&s) = record.strong_ids.first() {
            entries.push((record.prompt_id, s));
        }
    }
    let eval = |p: &TabularPolicy| {
        crate::losses::batch_loss_detached(batch, p, world, loss_config, step_seed, policy)
    };
    let fd = finite_diff_gradient(&eval, policy, 1e-6, &entries)?;
    for ((p, y), fd_val) in entries.iter().zip(fd) {
        let analytic = grad[[*p, *y]];
        let denom = analytic.abs().max(fd_val.abs()).max(1e-6);
        if (analytic - fd_val).abs() / denom > 1e-4 {
            return Err(Error::data(format!(
                "gradient self-audit failed at ({p},{y}): analytic {analytic}, finite-diff {fd_val}"
            )));
        }
    }
    Ok(())
}

/// Central finite differences `(L(θ+h·e) - L(θ-h·e)) / 2h` of a loss
/// evaluator at the sampled logit entries. The evaluator must be
/// deterministic (freeze any internal draws by seed); this is verified by
/// evaluating the base point twice.
pub fn finite_diff_gradient<F>(
    eval: &F,
    policy: &TabularPolicy,
    h: f64,
    entries: &[(usize, usize)],
) -> Result<Vec<f64>>
where
    F: Fn(&TabularPolicy) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::config("finite differences need h > 0"));
    }
    let base = eval(policy)?;
    let again = eval(policy)?;
    if base != again {
        return Err(Error::data(
            "loss evaluator is not deterministic under the frozen seed",
        ));
    }
    let mut out = Vec::with_capacity(entries.len());
    for &(p, y) in entries {
        let mut plus = policy.clone();
        plus.logits_mut()[[p, y]] += h;
        let mut minus = policy.clone();
        minus.logits_mut()[[p, y]] -= h;
        out.push((eval(&plus)? - eval(&minus)?) / (2.0 * h));
    }
    Ok(out)
}

/// Result of an exact preference-model fit.
#[derive(Debug, Clone)]
pub struct MleFitReport {
    pub policy: TabularPolicy,
    pub converged: bool,
    pub steps_run: usize,
    pub final_grad_max_norm: f64,
    pub final_nll: f64,
    /// Whether the objective was non-increasing over the whole run
    /// (violations are reported here, never silently accepted).
    pub monotone: bool,
}

/// Fits the policy by full-batch gradient descent on the exact
/// preference-model cross entropy summed over prompts (no sampling).
///
/// The per-row gradient has the closed form `w_x · beta · (q - p)` with `p`
/// the Boltzmann distribution of the true rewards and `q` the one induced
/// by the log-ratio reward, so the only stationary point is the global
/// optimum `q = p`. Stops when the gradient max-norm falls below `grad_tol`
/// or the step budget is exhausted, and reports which.
pub fn exact_mle_fit(
    world: &World,
    beta: f64,
    prompt_weights: &[f64],
    train_config: &TrainConfig,
    grad_tol: f64,
) -> Result<MleFitReport> {
    train_config.validate()?;
    if !(beta > 0.0) {
        return Err(Error::config("beta must be > 0"));
    }
    if prompt_weights.len() != world.n_prompts() {
        return Err(Error::shape("one prompt weight per prompt required"));
    }
    if prompt_weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::config("prompt weights must be nonnegative"));
    }

    let n_prompts = world.n_prompts();
    let targets: Vec<_> = (0..n_prompts)
        .map(|p| ipm_distribution(&world.rewards.row(p)))
        .collect::<Result<Vec<_>>>()?;

    let mut policy = world.reference.clone();
    let mut optimizer = OptimizerState::new(
        train_config.optimizer,
        (n_prompts, world.n_responses()),
    );
    let mut grad = Array2::zeros((n_prompts, world.n_responses()));

    let mut monotone = true;
    let mut prev_nll = f64::INFINITY;
    let mut converged = false;
    let mut steps_run = 0;
    let mut grad_max = f64::INFINITY;
    let mut nll = f64::NAN;

    for step in 0..=train_config.steps {
        nll = 0.0;
        grad_max = 0.0;
        for p in 0..n_prompts {
            let rewards = log_ratio_reward(&policy, world, beta, p)?;
            let z = crate::numeric::log_sum_exp(&rewards.to_vec());
            let target = &targets[p];
            let w = prompt_weights[p];
            for y in 0..world.n_responses() {
                let q = (rewards[y] - z).exp();
                let g = w * beta * (q - target[y]);
                grad[[p, y]] = g;
                grad_max = grad_max.max(g.abs());
                if target[y] > 0.0 {
                    nll -= w * target[y] * (rewards[y] - z);
                }
            }
        }
        if nll > prev_nll + 1e-12 {
            monotone = false;
        }
        prev_nll = nll;

        if grad_max < grad_tol {
            converged = true;
            break;
        }
        if step == train_config.steps {
            break;
        }
        optimizer.step(policy.logits_mut(), &grad, train_config.learning_rate);
        steps_run = step + 1;
    }

    Ok(MleFitReport {
        policy,
        converged,
        steps_run,
        final_grad_max_norm: grad_max,
        final_nll: nll,
        monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{LossConfig, LossVariant, WeakSource};
    use crate::datagen::{build_world, sample_preferences, SamplingScheme};
    use crate::objectives::analytic_rlhf_minimizer;
    use crate::prefs::{PreferenceRecord, SchemeInfo};
    use crate::world::{policy_total_variation, ResponseVocab, RewardTable};
    use ndarray::array;

    fn two_response_world() -> World {
        World::new(
            ResponseVocab::unit(2).unwrap(),
            RewardTable::new(array![[1.0, 0.0]]).unwrap(),
            TabularPolicy::uniform(1, 2),
            0,
        )
        .unwrap()
    }

    fn pair_dataset(world: &World, n: usize) -> Dataset {
        Dataset {
            world_hash: crate::io::world_hash(world),
            scheme: SchemeInfo::ExplicitPairDist,
            seed: 0,
            records: (0..n).map(|_| PreferenceRecord::pairwise(0, 0, 1)).collect(),
        }
    }

    #[test]
    fn test_train_zero_steps_returns_reference() {
        let w = two_response_world();
        let ds = pair_dataset(&w, 4);
        let cfg = LossConfig::new(LossVariant::Dpo, 0.5);
        let tc = TrainConfig::new(0.1, 0, 4, 3);
        let (policy, traj) = train(&w, &ds, &cfg, &tc).unwrap();
        assert_eq!(policy, w.reference);
        assert!(traj.points.is_empty());
    }

    #[test]
    fn test_train_zero_learning_rate_freezes_policy() {
        let w = two_response_world();
        let ds = pair_dataset(&w, 4);
        let cfg = LossConfig::new(LossVariant::Dpo, 0.5);
        let tc = TrainConfig::new(0.0, 25, 2, 3);
        let (policy, _) = train(&w, &ds, &cfg, &tc).unwrap();
        assert_eq!(policy, w.reference);
    }

    #[test]
    fn test_train_dpo_gap_grows_monotonically() {
        // Every record prefers response 0; the log-ratio gap must rise.
        let w = two_response_world();
        let ds = pair_dataset(&w, 8);
        let cfg = LossConfig::new(LossVariant::Dpo, 1.0);
        let mut tc = TrainConfig::new(0.25, 40, 8, 5);
        tc.optimizer = Optimizer::Sgd;
        tc.checkpoint_every = 1;
        let (_, traj) = train(&w, &ds, &cfg, &tc).unwrap();
        let mut prev_gap = 0.0;
        for point in &traj.points {
            let snap = point.snapshot.as_ref().unwrap();
            let r = log_ratio_reward(snap, &w, 1.0, 0).unwrap();
            let gap = r[0] - r[1];
            assert!(gap > prev_gap, "step {}: gap {gap} <= {prev_gap}", point.step);
            prev_gap = gap;
        }
    }

    #[test]
    fn test_train_bit_identical_reruns() {
        let w = build_world(11, 3, 8, 2.0, -6.0).unwrap();
        let ds = sample_preferences(&w, &SamplingScheme::best_of_k(3), 24, 1, 7).unwrap();
        let cfg = LossConfig::new(LossVariant::EpaNarrow, 0.1).with_weak(2, WeakSource::InBatch);
        let tc = TrainConfig::new(0.05, 30, 6, 13);
        let (a, traj_a) = train(&w, &ds, &cfg, &tc).unwrap();
        let (b, traj_b) = train(&w, &ds, &cfg, &tc).unwrap();
        assert_eq!(a.logits(), b.logits());
        let losses_a: Vec<f64> = traj_a.points.iter().map(|p| p.loss).collect();
        let losses_b: Vec<f64> = traj_b.points.iter().map(|p| p.loss).collect();
        assert_eq!(losses_a, losses_b);
    }

    #[test]
    fn test_train_audit_mode_passes() {
        let w = build_world(2, 2, 8, 2.0, -6.0).unwrap();
        let ds = sample_preferences(&w, &SamplingScheme::best_of_k(4), 16, 3, 3).unwrap();
        let cfg = LossConfig::new(LossVariant::EpaGeneral, 0.1);
        let mut tc = TrainConfig::new(0.05, 101, 4, 1);
        tc.audit_gradients = true;
        assert!(train(&w, &ds, &cfg, &tc).is_ok());
    }

    #[test]
    fn test_train_rejects_incompatible_shapes() {
        let w = build_world(2, 2, 8, 2.0, -6.0).unwrap();
        // Dataset with 3 strong negatives cannot train a pairwise loss.
        let ds = sample_preferences(&w, &SamplingScheme::best_of_k(4), 8, 3, 3).unwrap();
        let cfg = LossConfig::new(LossVariant::Dpo, 0.1);
        let tc = TrainConfig::new(0.05, 10, 4, 1);
        assert!(train(&w, &ds, &cfg, &tc).is_err());
        // Batch larger than the dataset.
        let cfg = LossConfig::new(LossVariant::EpaGeneral, 0.1);
        let tc = TrainConfig::new(0.05, 10, 64, 1);
        assert!(train(&w, &ds, &cfg, &tc).is_err());
    }

    #[test]
    fn test_finite_diff_quadratic_probe() {
        // L = Σ θ²: derivative at θ = 3 is 6.
        let policy = TabularPolicy::from_logits(array![[3.0, -1.0]]).unwrap();
        let eval = |p: &TabularPolicy| Ok(p.logits().iter().map(|x| x * x).sum());
        let fd = finite_diff_gradient(&eval, &policy, 1e-6, &[(0, 0), (0, 1)]).unwrap();
        assert!((fd[0] - 6.0).abs() < 1e-6);
        assert!((fd[1] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn test_finite_diff_step_size_stability() {
        let policy = TabularPolicy::from_logits(array![[0.4, -0.2, 0.1]]).unwrap();
        // Smooth loss: log-sum-exp of the logits.
        let eval = |p: &TabularPolicy| {
            Ok(crate::numeric::log_sum_exp(
                &p.logits().iter().copied().collect::<Vec<_>>(),
            ))
        };
        let at_h = finite_diff_gradient(&eval, &policy, 1e-5, &[(0, 0)]).unwrap()[0];
        let at_h10 = finite_diff_gradient(&eval, &policy, 1e-6, &[(0, 0)]).unwrap()[0];
        assert!((at_h - at_h10).abs() < 1e-6);
    }

    #[test]
    fn test_finite_diff_rejects_nondeterministic_eval() {
        use std::cell::Cell;
        let policy = TabularPolicy::uniform(1, 2);
        let counter = Cell::new(0.0);
        let eval = |_: &TabularPolicy| {
            counter.set(counter.get() + 1.0);
            Ok(counter.get())
        };
        assert!(finite_diff_gradient(&eval, &policy, 1e-6, &[(0, 0)]).is_err());
    }

    #[test]
    fn test_exact_mle_fit_reaches_slope1() {
        let w = build_world(21, 3, 8, 1.5, -3.0).unwrap();
        let beta = 0.1;
        let mut tc = TrainConfig::new(30.0, 200_000, 1, 0);
        tc.optimizer = Optimizer::Sgd;
        let weights = vec![1.0; w.n_prompts()];
        let report = exact_mle_fit(&w, beta, &weights, &tc, 1e-11).unwrap();
        assert!(report.converged, "grad max-norm {}", report.final_grad_max_norm);

        // Per-prompt deviation from slope-1 linearity.
        for p in 0..w.n_prompts() {
            let r = log_ratio_reward(&report.policy, &w, beta, p).unwrap();
            let truth = w.rewards.row(p);
            let dev: Vec<f64> = r.iter().zip(truth.iter()).map(|(a, b)| a - b).collect();
            let spread = dev.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - dev.iter().copied().fold(f64::INFINITY, f64::min);
            assert!(spread < 1e-4, "prompt {p}: deviation spread {spread}");
        }

        // And agreement with the closed-form minimizer.
        let opt = analytic_rlhf_minimizer(&w, beta).unwrap();
        let tv = policy_total_variation(&report.policy, &opt);
        assert!(tv < 1e-4, "tv {tv}");
    }

    #[test]
    fn test_exact_mle_fit_monotone_under_small_sgd() {
        let w = build_world(5, 2, 8, 1.0, -3.0).unwrap();
        let mut tc = TrainConfig::new(1e-3, 2_000, 1, 0);
        tc.optimizer = Optimizer::Sgd;
        let report = exact_mle_fit(&w, 0.5, &[1.0, 1.0], &tc, 1e-12).unwrap();
        assert!(report.monotone);
    }

    #[test]
    fn test_exact_mle_fit_accepts_control_beta() {
        let w = build_world(9, 2, 8, 1.0, -3.0).unwrap();
        let mut tc = TrainConfig::new(5.0, 20_000, 1, 0);
        tc.optimizer = Optimizer::Sgd;
        let report = exact_mle_fit(&w, 0.01, &[1.0, 1.0], &tc, 1e-9);
        assert!(report.is_ok());
    }
}
