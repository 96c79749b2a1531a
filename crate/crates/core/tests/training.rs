use rewardmatch::dataset::{build_dataset, decode, BuildConfig, DatasetSplits, Y_SCALE};
use rewardmatch::evalmetrics::pearson;
use rewardmatch::evaluator::eval_expr;
use rewardmatch::grammar::expr_grammar;
use rewardmatch::model::ModelConfig;
use rewardmatch::reward::build_scalar_index;
use rewardmatch::training::{train_ml, train_surrogate, ObjectiveKind, TrainConfig};

fn splits() -> DatasetSplits {
    let mut b = BuildConfig::new(6_000, 200, 200, 13);
    b.train_cap = Some(3_000);
    build_dataset(&expr_grammar(), &b).unwrap()
}

fn model_config(s: &DatasetSplits) -> ModelConfig {
    ModelConfig {
        vocab_size: s.vocab.len(),
        embed_dim: 16,
        cond_dim: 1,
        hidden_dim: 48,
        num_layers: 2,
        max_len: s.longest_sequence(),
    }
}

fn config(objective: ObjectiveKind, seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        objective,
        max_epochs: epochs,
        batch_size: 32,
        lr: 5e-3,
        val_subset: 100,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_same_bytes() {
    let s = splits();
    let idx = build_scalar_index(&s.train.iter().map(|e| e.value).collect::<Vec<_>>());
    for objective in [ObjectiveKind::Ml, ObjectiveKind::Surrogate] {
        let run = |seed| match objective {
            ObjectiveKind::Ml => train_ml(&s, model_config(&s), &config(objective, seed, 1)).unwrap(),
            _ => train_surrogate(&s, &idx, model_config(&s), &config(objective, seed, 1)).unwrap(),
        };
        let (a, b, c) = (run(1), run(1), run(2));
        assert_eq!(a.model.to_bytes(true), b.model.to_bytes(true), "{objective:?}");
        assert_eq!(a.history.to_csv(), b.history.to_csv());
        assert_ne!(a.model.to_bytes(false), c.model.to_bytes(false));
    }
}

#[test]
fn trained_model_follows_its_conditioning() {
    let s = splits();
    let out = train_ml(&s, model_config(&s), &config(ObjectiveKind::Ml, 3, 6)).unwrap();
    let targets: Vec<f64> = (-8..=8).map(|k| k as f64 * 50.0).collect();
    let conds: Vec<Vec<f64>> = targets.iter().map(|t| vec![t / Y_SCALE]).collect();
    let crefs: Vec<&[f64]> = conds.iter().map(|c| &c[..]).collect();
    let decoded = out.model.greedy_batch(&crefs, out.model.config.max_len).unwrap();
    let (mut ys, mut fs) = (Vec::new(), Vec::new());
    for (t, seq) in targets.iter().zip(&decoded) {
        if let Some(v) = decode(seq, &s.vocab).ok().and_then(|x| eval_expr(&x).value()) {
            ys.push(*t);
            fs.push(v as f64);
        }
    }
    assert!(ys.len() >= 10, "only {} valid decodes", ys.len());
    let r = pearson(&ys, &fs).unwrap();
    assert!(r > 0.5, "correlation {r}");
}
