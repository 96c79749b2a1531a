//! Desk-scale comparison protocol: one dataset, several training methods,
//! each evaluated by sampling on held-out targets.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::augmentation::{augment_classic, augment_raml, AugmentConfig, AugmentError};
use crate::dataset::{build_dataset, sha256_hex, BuildConfig, DatasetError, DatasetSplits};
use crate::evalmetrics::{conditional_eval_scalar, test_nll_per_token, EvalReport, MetricsError, ModelSampler};
use crate::grammar::Pcfg;
use crate::model::{ConditionalLstm, ModelConfig};
use crate::reward::build_scalar_index;
use crate::training::{train_ml, train_ml_on, train_reinforce, train_surrogate, ObjectiveKind, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ml,
    Surrogate,
    ClassicAugmentation,
    RamlAugmentation,
    Reinforce,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ml, Method::Surrogate, Method::ClassicAugmentation, Method::RamlAugmentation, Method::Reinforce];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ml => "ml",
            Method::Surrogate => "surrogate",
            Method::ClassicAugmentation => "classic_augmentation",
            Method::RamlAugmentation => "raml_augmentation",
            Method::Reinforce => "reinforce",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub n_samples: usize,
    pub train_size: usize,
    pub valid: usize,
    pub test: usize,
    pub data_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warm_start_epochs: usize,
    pub eval_samples: usize,
    pub eval_targets: usize,
    pub augment: AugmentConfig,
}

impl Default for DeskConfig {
    fn default() -> Self {
        DeskConfig {
            n_samples: 110_000,
            train_size: 60_000,
            valid: 2_000,
            test: 2_000,
            data_seed: 7,
            epochs: 8,
            batch_size: 64,
            lr: 1e-3,
            warm_start_epochs: 4,
            eval_samples: 25,
            eval_targets: 2_000,
            augment: AugmentConfig::default(),
        }
    }
}

impl DeskConfig {
    pub fn dataset(&self, pcfg: &Pcfg) -> Result<DatasetSplits, DatasetError> {
        let mut b = BuildConfig::new(self.n_samples, self.valid, self.test, self.data_seed);
        b.train_cap = Some(self.train_size);
        build_dataset(pcfg, &b)
    }

    pub fn model_config(&self, splits: &DatasetSplits) -> ModelConfig {
        ModelConfig {
            max_len: splits.longest_sequence().max(2),
            ..ModelConfig::desk(splits.vocab.len(), 1)
        }
    }

    pub fn train_config(&self, objective: ObjectiveKind, seed: u64) -> TrainConfig {
        TrainConfig {
            objective,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            lr: self.lr,
            warm_start_epochs: self.warm_start_epochs,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub seed: u64,
    pub report: EvalReport,
    pub history: TrainHistory,
    pub checkpoint_hash: String,
    /// Added pairs for the augmentation methods.
    pub augmented_pairs: Option<usize>,
}

pub fn checkpoint_hash(model: &ConditionalLstm) -> String {
    sha256_hex(&[&model.to_bytes(false)])
}

/// Sampling evaluation on the first `eval_targets` test targets plus the
/// per-token NLL on the same targets.
pub fn evaluate(model: &ConditionalLstm, splits: &DatasetSplits, cfg: &DeskConfig, seed: u64) -> Result<EvalReport, ExperimentError> {
    let targets = &splits.test[..cfg.eval_targets.min(splits.test.len())];
    let train: HashSet<String> = splits.train.iter().map(|e| e.expr.clone()).collect();
    let sampler = ModelSampler {
        model,
        vocab: &splits.vocab,
    };
    let mut report = conditional_eval_scalar(&sampler, targets, &train, cfg.eval_samples, 1, seed)?;
    report.test_nll_per_token = Some(test_nll_per_token(model, targets)?);
    report.metadata.checkpoint_hash = Some(checkpoint_hash(model));
    Ok(report)
}

fn finish(
    method: Method,
    seed: u64,
    model: &ConditionalLstm,
    history: TrainHistory,
    splits: &DatasetSplits,
    cfg: &DeskConfig,
    augmented_pairs: Option<usize>,
) -> Result<MethodResult, ExperimentError> {
    let report = evaluate(model, splits, cfg, seed)?;
    log::info!(
        "{} seed {seed}: validity {:.4} mae {:.3} within3 {:.4} nll {:.4}",
        method.name(),
        report.validity.mean,
        report.mae.mean,
        report.within_3_accuracy.mean,
        report.test_nll_per_token.unwrap_or(f64::NAN)
    );
    Ok(MethodResult {
        method,
        seed,
        report,
        history,
        checkpoint_hash: checkpoint_hash(model),
        augmented_pairs,
    })
}

/// Runs every method for one training seed. REINFORCE starts from the ML
/// run's model after `warm_start_epochs` and gets the surrogate's total
/// work budget minus the warm start's.
pub fn run_seed(splits: &DatasetSplits, cfg: &DeskConfig, seed: u64, methods: &[Method]) -> Result<Vec<MethodResult>, ExperimentError> {
    let mcfg = cfg.model_config(splits);
    let steps = splits.train.len().div_ceil(cfg.batch_size);
    let mut out = Vec::new();
    let mut warm = None;
    let mut surrogate_work = None;

    if methods.contains(&Method::Ml) || methods.contains(&Method::Reinforce) {
        let tc = TrainConfig {
            snapshot_epoch: Some(cfg.warm_start_epochs),
            ..cfg.train_config(ObjectiveKind::Ml, seed)
        };
        let r = train_ml(splits, mcfg, &tc)?;
        warm = r.snapshot.clone().or_else(|| Some((r.model.clone(), r.history.work_units)));
        if methods.contains(&Method::Ml) {
            out.push(finish(Method::Ml, seed, &r.model, r.history, splits, cfg, None)?);
        }
    }
    if methods.contains(&Method::Surrogate) || methods.contains(&Method::Reinforce) {
        let index = build_scalar_index(&splits.train.iter().map(|e| e.value).collect::<Vec<_>>());
        let r = train_surrogate(splits, &index, mcfg, &cfg.train_config(ObjectiveKind::Surrogate, seed))?;
        surrogate_work = Some(r.history.work_units);
        if methods.contains(&Method::Surrogate) {
            out.push(finish(Method::Surrogate, seed, &r.model, r.history, splits, cfg, None)?);
        }
    }
    for (method, classic) in [(Method::ClassicAugmentation, true), (Method::RamlAugmentation, false)] {
        if !methods.contains(&method) {
            continue;
        }
        let set = if classic {
            augment_classic(&splits.train, &splits.vocab, &cfg.augment, seed)?
        } else {
            augment_raml(&splits.train, &splits.vocab, &cfg.augment, seed)?
        };
        let examples: Vec<_> = set.all_examples().into_iter().filter(|e| e.tokens.len() <= mcfg.max_len).collect();
        let tc = TrainConfig {
            steps_per_epoch: Some(steps),
            ..cfg.train_config(ObjectiveKind::Ml, seed)
        };
        let r = train_ml_on(&examples, splits, mcfg, &tc)?;
        out.push(finish(method, seed, &r.model, r.history, splits, cfg, Some(set.added.len()))?);
    }
    if methods.contains(&Method::Reinforce) {
        let (model, warm_work) = warm.expect("ml run precedes reinforce");
        let budget = surrogate_work.expect("surrogate run precedes reinforce").saturating_sub(warm_work).max(1);
        let tc = TrainConfig {
            work_budget: Some(budget),
            ..cfg.train_config(ObjectiveKind::Reinforce, seed)
        };
        let r = train_reinforce(splits, model, &tc)?;
        out.push(finish(Method::Reinforce, seed, &r.model, r.history, splits, cfg, None)?);
    }
    Ok(out)
}
