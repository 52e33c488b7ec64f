//! Property tests for the algebraic invariants the library leans on:
//! normalization, shift invariances, minimality of the closed-form policy,
//! the slope-1 equivalence and the likelihood-degeneracy identities.

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use preflab_core::config::{LossConfig, LossVariant};
use preflab_core::datagen::{btm_degenerate_transform, build_world};
use preflab_core::diagnostics::expected_bt_nll;
use preflab_core::losses::{epa_general_loss, Batch};
use preflab_core::objectives::{
    analytic_rlhf_minimizer, entropy, exact_energy_discrepancy, ipm_distribution, ipm_nll_exact,
    kl_divergence, log_ratio_reward, rlhf_loss,
};
use preflab_core::prefs::PreferenceRecord;
use preflab_core::world::{
    make_symmetric_kernel, perturbed_policy, total_variation, ResponseVocab, RewardTable,
    TabularPolicy, World,
};

fn finite_logits(v: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0..30.0f64, v)
}

fn world_from_rewards(rewards: Vec<f64>) -> World {
    let v = rewards.len();
    World::new(
        ResponseVocab::unit(v).unwrap(),
        RewardTable::new(Array2::from_shape_vec((1, v), rewards).unwrap()).unwrap(),
        TabularPolicy::uniform(1, v),
        0,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn prop_softmax_rows_normalize(logits in finite_logits(6)) {
        let policy =
            TabularPolicy::from_logits(Array2::from_shape_vec((1, 6), logits).unwrap()).unwrap();
        let row = policy.prob_row(0);
        prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        prop_assert!(row.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn prop_symmetric_kernel_valid(v in 2usize..12, stay in 0.01..0.99f64) {
        let kernel = make_symmetric_kernel(v, stay).unwrap();
        for y in 0..v {
            let row = kernel.row(y);
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            for z in 0..v {
                prop_assert_eq!(kernel.prob(y, z), kernel.prob(z, y));
            }
        }
    }

    #[test]
    fn prop_ipm_nll_decomposes_into_entropy_plus_kl(
        rewards in finite_logits(5),
        logits in finite_logits(5),
        beta in 0.05..2.0f64,
    ) {
        let world = world_from_rewards(rewards);
        let policy =
            TabularPolicy::from_logits(Array2::from_shape_vec((1, 5), logits).unwrap()).unwrap();
        let p = ipm_distribution(&world.rewards.row(0)).unwrap();
        let q = ipm_distribution(&log_ratio_reward(&policy, &world, beta, 0).unwrap()).unwrap();
        let nll = ipm_nll_exact(&policy, &world, beta, 0).unwrap();
        prop_assert!((nll - entropy(&p) - kl_divergence(&p, &q)).abs() < 1e-12);
    }

    #[test]
    fn prop_energy_discrepancy_shift_invariant(
        rewards in finite_logits(5),
        target_logits in finite_logits(5),
        shift in -20.0..20.0f64,
        stay in 0.05..0.95f64,
    ) {
        let kernel = make_symmetric_kernel(5, stay).unwrap();
        let rewards = Array1::from(rewards);
        let target = ipm_distribution(&Array1::from(target_logits)).unwrap();
        let a = exact_energy_discrepancy(&rewards, &kernel, &target).unwrap();
        let b = exact_energy_discrepancy(&rewards.mapv(|r| r + shift), &kernel, &target).unwrap();
        // Relative slack: huge shifts stress the log-sum-exp path.
        prop_assert!((a - b).abs() < 1e-11 * (1.0 + a.abs()));
    }

    #[test]
    fn prop_contrastive_loss_invariant_under_row_shift(
        logits in finite_logits(6),
        alpha in 0.01..5.0f64,
    ) {
        // Equal lengths turn the length penalty into a per-prompt constant
        // shift of the evaluated reward row, which softmax-form losses
        // ignore.
        let world = world_from_rewards(vec![1.0, 0.5, 0.0, -0.5, -1.0, -6.0]);
        let policy =
            TabularPolicy::from_logits(Array2::from_shape_vec((1, 6), logits).unwrap()).unwrap();
        let record = PreferenceRecord {
            prompt_id: 0,
            winner_id: 0,
            strong_ids: vec![2, 4],
            weak: preflab_core::WeakNegatives::Ids(vec![5]),
        };
        let batch = Batch {
            records: vec![record],
            weak: vec![preflab_core::losses::ResolvedWeak::Ids(vec![5])],
        };
        let base_cfg = LossConfig::new(LossVariant::EpaGeneral, 0.3);
        let mut shifted_cfg = base_cfg.clone();
        shifted_cfg.tricks.len_penalty_alpha = alpha;
        let a = epa_general_loss(&batch, &policy, &world, &base_cfg).unwrap().loss;
        let b = epa_general_loss(&batch, &policy, &world, &shifted_cfg).unwrap().loss;
        prop_assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn test_minimizer_beats_1000_random_policies() {
    let world = build_world(41, 4, 12, 2.0, -6.0).unwrap();
    let beta = 0.3;
    let minimizer = analytic_rlhf_minimizer(&world, beta).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(17);

    for prompt in 0..world.n_prompts() {
        let best = rlhf_loss(&minimizer, &world, beta, prompt).unwrap();
        for _ in 0..250 {
            let candidate = perturbed_policy(&world.reference, rng.gen::<f64>() * 3.0, &mut rng);
            let loss = rlhf_loss(&candidate, &world, beta, prompt).unwrap();
            assert!(loss >= best - 1e-12);
            let tv = total_variation(&candidate.prob_row(prompt), &minimizer.prob_row(prompt));
            if tv > 1e-3 {
                assert!(loss > best, "tv {tv} but loss tied");
            }
        }
    }
}

#[test]
fn test_slope1_equivalence_both_directions() {
    let world = build_world(43, 3, 10, 2.0, -6.0).unwrap();
    let beta = 0.25;
    let minimizer = analytic_rlhf_minimizer(&world, beta).unwrap();

    // Constructing the policy from slope-1 rows (r_true + c) recovers the
    // minimizer and a flat deviation profile.
    let mut logits = Array2::zeros((world.n_prompts(), world.n_responses()));
    for p in 0..world.n_prompts() {
        let lref = world.reference.log_prob_row(p);
        for y in 0..world.n_responses() {
            logits[[p, y]] = lref[y] + (world.rewards.get(p, y) + 0.7) / beta;
        }
    }
    let slope1_policy = TabularPolicy::from_logits(logits).unwrap();
    for p in 0..world.n_prompts() {
        let tv = total_variation(&slope1_policy.prob_row(p), &minimizer.prob_row(p));
        assert!(tv < 1e-9, "prompt {p}: tv {tv}");
        let r = log_ratio_reward(&slope1_policy, &world, beta, p).unwrap();
        let dev: Vec<f64> = r
            .iter()
            .zip(world.rewards.row(p).iter())
            .map(|(a, b)| a - b)
            .collect();
        let spread = dev.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - dev.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(spread < 1e-8, "prompt {p}: spread {spread}");
    }

    // A policy far from the minimizer breaks the linearity by a clear
    // margin.
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let off = perturbed_policy(&minimizer, 0.5, &mut rng);
    let mut any_far = false;
    for p in 0..world.n_prompts() {
        let tv = total_variation(&off.prob_row(p), &minimizer.prob_row(p));
        if tv <= 1e-3 {
            continue;
        }
        any_far = true;
        let r = log_ratio_reward(&off, &world, beta, p).unwrap();
        let dev: Vec<f64> = r
            .iter()
            .zip(world.rewards.row(p).iter())
            .map(|(a, b)| a - b)
            .collect();
        let spread = dev.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - dev.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(spread > 1e-8, "prompt {p}: detached policy has flat deviations");
    }
    assert!(any_far, "perturbation failed to move the policy");
}

#[test]
fn test_degenerate_transform_preserves_expected_likelihood() {
    // The full multiplicity certificate at the property level: identical
    // expected pairwise likelihood, distinct policies, distinct policy
    // objectives.
    let world = build_world(47, 2, 10, 2.0, -7.0).unwrap();
    let y_star = 4;
    let scheme = preflab_core::datagen::SamplingScheme::degenerate_uniform(&world, y_star).unwrap();
    let pair_weights = match &scheme {
        preflab_core::datagen::SamplingScheme::DegenerateAvoidYstar { pair_weights, .. } => {
            pair_weights
        }
        _ => unreachable!(),
    };
    let mut rng = ChaCha12Rng::seed_from_u64(5);

    for (prompt, pair_table) in pair_weights.iter().enumerate() {
        let base = perturbed_policy(&world.reference, 0.6, &mut rng);
        let ref_probs = world.reference.prob_row(prompt);
        let base_probs = base.prob_row(prompt);
        let rewards = Array1::from_iter(
            base_probs
                .iter()
                .zip(ref_probs.iter())
                .map(|(&pi, &f)| pi.ln() - f.ln()),
        );
        for a in [-0.2, -0.5, -1.5] {
            let shifted = btm_degenerate_transform(&rewards, &ref_probs, y_star, a).unwrap();
            let truth = world.rewards.row(prompt);
            let gap = (expected_bt_nll(pair_table, &truth, &rewards)
                - expected_bt_nll(pair_table, &truth, &shifted))
            .abs();
            assert!(gap < 1e-10, "likelihood gap {gap}");

            let shifted_probs = Array1::from_iter(
                shifted
                    .iter()
                    .zip(ref_probs.iter())
                    .map(|(&r, &f)| f * r.exp()),
            );
            assert!((shifted_probs.sum() - 1.0).abs() < 1e-9);
            let tv = total_variation(&base_probs, &shifted_probs);
            assert!(tv > 0.0, "shift {a} left the policy unchanged");
        }
    }
}

#[test]
fn test_best_of_k_winner_property_across_seeds() {
    for seed in 0..20u64 {
        let world = build_world(seed, 3, 16, 2.0, -6.0).unwrap();
        let scheme = preflab_core::datagen::SamplingScheme::best_of_k(4);
        let ds =
            preflab_core::datagen::sample_preferences(&world, &scheme, 40, 3, seed + 100).unwrap();
        for r in &ds.records {
            let wr = world.rewards.get(r.prompt_id, r.winner_id);
            for &s in &r.strong_ids {
                assert!(wr >= world.rewards.get(r.prompt_id, s));
            }
        }
        // Serialized form replays byte-for-byte.
        let text = preflab_core::io::dataset_to_jsonl(&ds).unwrap();
        let again =
            preflab_core::datagen::sample_preferences(&world, &scheme, 40, 3, seed + 100).unwrap();
        assert_eq!(text, preflab_core::io::dataset_to_jsonl(&again).unwrap());
    }
}
