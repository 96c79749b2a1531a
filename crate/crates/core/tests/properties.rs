use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rewardmatch::dataset::{build_dataset, BuildConfig, START};
use rewardmatch::entropy::{entropy_exact_enum, entropy_greedy, entropy_straight_through, enumerate_events};
use rewardmatch::evalmetrics::{generation_metrics, pearson};
use rewardmatch::grammar::expr_grammar;
use rewardmatch::model::{ConditionalLstm, ModelConfig};
use rewardmatch::nn::linalg::gemm;
use rewardmatch::nn::ops::{entropy, softmax};
use rewardmatch::reward::{build_vector_index, MatchIndex, RewardSpec};

fn small_model(seed: u64, vocab: usize, max_len: usize) -> ConditionalLstm {
    let cfg = ModelConfig {
        vocab_size: vocab,
        embed_dim: 3,
        cond_dim: 1,
        hidden_dim: 5,
        num_layers: 2,
        max_len,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = ConditionalLstm::new(cfg, &mut rng).unwrap();
    // Larger weights than the default init so distributions are far from uniform.
    for p in &mut m.params.params {
        p.value.iter_mut().for_each(|v| *v *= 3.0);
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x > 0.0));
        let h = entropy(&p);
        prop_assert!(h >= -1e-12 && h <= (z.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn gemm_matches_naive(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c0: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut c = c0.clone();
        gemm(m, k, n, &a, &b, 1.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want = c0[i * n + j] + (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum::<f64>();
                prop_assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn model_mass_sums_to_one(seed in any::<u64>(), y in -0.9f64..0.9) {
        let m = small_model(seed, 4, 5);
        let events = enumerate_events(&m, &[y]).unwrap();
        let mass: f64 = events.iter().map(|(_, lp)| lp.exp()).sum();
        prop_assert!((mass - 1.0).abs() < 1e-9);
        // log_prob agrees with the enumeration's own accumulation.
        for (seq, lp) in events.iter().take(20) {
            prop_assert!((m.log_prob(seq, &[y]).unwrap() - lp).abs() < 1e-10);
        }
    }

    #[test]
    fn step_entropies_bounded_and_estimators_deterministic(seed in any::<u64>(), y in -0.9f64..0.9) {
        let m = small_model(seed, 5, 5);
        let d = 5.0f64;
        let p = m.step_distribution(&[START], &[y]).unwrap();
        let h = entropy(&p);
        prop_assert!(h >= 0.0 && h <= d.ln() + 1e-12);
        let g1 = entropy_greedy(&m, &[y]).unwrap().value;
        let g2 = entropy_greedy(&m, &[y]).unwrap().value;
        prop_assert_eq!(g1.to_bits(), g2.to_bits());
        let s1 = entropy_straight_through(&m, &[y]).unwrap().value;
        let s2 = entropy_straight_through(&m, &[y]).unwrap().value;
        prop_assert_eq!(s1.to_bits(), s2.to_bits());
        let exact = entropy_exact_enum(&m, &[y]).unwrap().value;
        prop_assert!(exact >= 0.0);
    }

    #[test]
    fn batched_scoring_matches_single(seed in any::<u64>()) {
        let m = small_model(seed, 6, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let conds: Vec<Vec<f64>> = (0..5).map(|k| vec![k as f64 / 10.0 - 0.2]).collect();
        let crefs: Vec<&[f64]> = conds.iter().map(|c| &c[..]).collect();
        let seqs = m.sample_batch(&crefs, 7, &mut rng).unwrap();
        let srefs: Vec<&[usize]> = seqs.iter().map(|s| s.tokens()).collect();
        let batched = m.log_probs(&srefs, &crefs).unwrap();
        for i in 0..5 {
            prop_assert!((batched[i] - m.log_prob(srefs[i], crefs[i]).unwrap()).abs() < 1e-12);
            prop_assert!(batched[i] <= 0.0);
        }
    }

    #[test]
    fn backward_is_linear(seed in any::<u64>()) {
        let m0 = small_model(seed, 6, 7);
        let seqs: [&[usize]; 2] = [&[1, 3, 4, 2], &[1, 5, 2]];
        let conds: [&[f64]; 2] = [&[0.1], &[-0.4]];
        let mut both = m0.clone();
        both.params.zero_grad();
        both.nll_grad(&seqs, &conds, &[0.7, 1.3]).unwrap();
        let mut parts = m0.clone();
        parts.params.zero_grad();
        parts.nll_grad(&seqs[..1], &conds[..1], &[0.7]).unwrap();
        parts.nll_grad(&seqs[1..], &conds[1..], &[1.3]).unwrap();
        for (a, b) in both.params.params.iter().zip(&parts.params.params) {
            for (x, y) in a.grad.iter().zip(&b.grad) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn generation_counts_are_consistent(samples in prop::collection::vec(prop::option::of("[1-9][+*-][1-9]"), 1..40)) {
        let train: HashSet<String> = ["1+1".to_string(), "2*3".to_string()].into();
        let g = generation_metrics(&samples, &train).unwrap();
        prop_assert!((0.0..=1.0).contains(&g.validity));
        prop_assert!((0.0..=1.0).contains(&g.uniqueness));
        prop_assert!((0.0..=1.0).contains(&g.novelty));
        if g.valid > 0 {
            let distinct = g.uniqueness * g.validity * g.total as f64;
            prop_assert!((distinct - g.distinct_valid as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn pearson_matches_two_pass(xs in prop::collection::vec(-10.0f64..10.0, 3..30), noise in prop::collection::vec(-3.0f64..3.0, 30)) {
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, e)| 0.5 * x + e).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        prop_assume!(sxx > 1e-9 && syy > 1e-9);
        let r = pearson(&xs, &ys).unwrap();
        prop_assert!((r - sxy / (sxx * syy).sqrt()).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn index_rows_are_distributions(seed in any::<u64>(), eps in 0.5f64..5.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let props: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let spec = RewardSpec::l1(1.0, eps).unwrap();
        let MatchIndex::Vector(rows) = build_vector_index(&props, &props, &spec, 512).unwrap() else { unreachable!() };
        for row in &rows.rows {
            prop_assert!(!row.is_empty());
            prop_assert!((row.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn equal_rewards_give_uniform_rows() {
    let props = vec![vec![0.0]; 7];
    let spec = RewardSpec::l1(1.0, 1.0).unwrap();
    let MatchIndex::Vector(rows) = build_vector_index(&props[..2], &props, &spec, 512).unwrap() else {
        unreachable!()
    };
    for row in &rows.rows {
        assert_eq!(row.len(), 7);
        assert!(row.iter().all(|e| e.1 == 1.0 / 7.0));
    }
}

#[test]
fn dataset_invariants() {
    let d = build_dataset(&expr_grammar(), &BuildConfig::new(20_000, 500, 500, 3)).unwrap();
    let mut seen = HashSet::new();
    for e in d.train.iter().chain(&d.valid).chain(&d.test) {
        assert!(seen.insert(e.expr.as_str()), "{} in two splits", e.expr);
        assert!(e.cond.iter().all(|c| c.abs() < 1.0));
    }
    assert_eq!(d.vocab.len(), 19);
    assert_eq!(d.vocab.chars().len(), 16);
}
