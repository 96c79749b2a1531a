//! Training loops. Every objective plugs into one skeleton (batching, Adam,
//! clipping, per-epoch validation, early stopping) and only supplies the
//! per-batch gradient.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{perturb, proposal_log_q, sample_edit_distance, AugmentConfig};
use crate::dataset::{decode, encode, DatasetSplits, LabeledExample, TokenSequence, Vocab};
use crate::entropy::{entropy_greedy_grad, EntropyError};
use crate::evalmetrics::{test_nll_per_token, MetricsError};
use crate::evaluator::eval_expr;
use crate::model::{ConditionalLstm, ModelConfig, ModelError};
use crate::nn::params::AdamConfig;
use crate::reward::{sample_matches_scalar, sample_row, presample_training_pairs, MatchIndex, MatchedPair, RewardError, RewardSpec, ScalarMatchSampler};

/// Penalty a validation target receives when its greedy decode is invalid.
pub const INVALID_DECODE_PENALTY: f64 = 1000.0;

const TRAIN_TOKEN_COST: u64 = 3;
const SAMPLE_TOKEN_COST: u64 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(&'static str),
    #[error("non-finite loss or gradient at epoch {epoch}, step {step}; batch: {batch}")]
    NonFinite { epoch: usize, step: usize, batch: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Ml,
    Surrogate,
    SurrogateEntropy,
    Reinforce,
    RamlIs,
}

impl ObjectiveKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.replace('_', "-").as_str() {
            "ml" => ObjectiveKind::Ml,
            "surrogate" => ObjectiveKind::Surrogate,
            "surrogate-entropy" => ObjectiveKind::SurrogateEntropy,
            "reinforce" => ObjectiveKind::Reinforce,
            "raml-is" => ObjectiveKind::RamlIs,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Ml => "ml",
            ObjectiveKind::Surrogate => "surrogate",
            ObjectiveKind::SurrogateEntropy => "surrogate-entropy",
            ObjectiveKind::Reinforce => "reinforce",
            ObjectiveKind::RamlIs => "raml-is",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub entropy_weight: f64,
    /// K: matches per target (surrogate) or proposals per pair (RAML-IS).
    pub samples_per_target: usize,
    /// M: samples per target for REINFORCE.
    pub reinforce_samples: usize,
    pub reinforce_temperature: f64,
    pub warm_start_epochs: usize,
    pub seed: u64,
    pub early_stop_factor: f64,
    /// Surrogate pairs drawn once up front instead of per batch.
    pub presampled: bool,
    /// Validation targets used for the per-epoch property error.
    pub val_subset: usize,
    pub clip_norm: f64,
    /// Overrides the default of one pass over the training targets.
    pub steps_per_epoch: Option<usize>,
    /// Stops once this many work units are spent (see [`TrainHistory::work_units`]).
    pub work_budget: Option<u64>,
    /// Keep a copy of the model as it stands after this epoch.
    pub snapshot_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveKind::Ml,
            batch_size: 20,
            max_epochs: 100,
            lr: 1e-3,
            entropy_weight: 0.0,
            samples_per_target: 10,
            reinforce_samples: 30,
            reinforce_temperature: 0.5,
            warm_start_epochs: 6,
            seed: 0,
            early_stop_factor: 2.0,
            presampled: true,
            val_subset: 2000,
            clip_norm: 5.0,
            steps_per_epoch: None,
            work_budget: None,
            snapshot_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1"));
        }
        if !(self.early_stop_factor > 1.0) {
            return Err(TrainError::InvalidConfig("early_stop_factor must exceed 1"));
        }
        if !(self.entropy_weight >= 0.0) {
            return Err(TrainError::InvalidConfig("entropy_weight must be non-negative"));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::InvalidConfig("lr must be positive"));
        }
        if self.samples_per_target == 0 || self.reinforce_samples == 0 {
            return Err(TrainError::InvalidConfig("sample counts must be at least 1"));
        }
        if !(self.reinforce_temperature > 0.0) {
            return Err(TrainError::InvalidConfig("reinforce_temperature must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::InvalidConfig("clip_norm must be positive"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    fn steps_for(&self, n: usize) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| n.div_ceil(self.batch_size)).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetric {
    pub epoch: usize,
    pub train_loss: f64,
    /// Greedy-decode MAE on the validation subset, invalid decodes costing
    /// [`INVALID_DECODE_PENALTY`].
    pub property_error: f64,
    /// Mean NLL per predicted token on the same subset.
    pub nll: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCounters {
    pub steps: usize,
    pub skipped_batches: usize,
    pub skipped_targets: usize,
    pub proposals: usize,
    pub zero_reward_proposals: usize,
    pub discarded_samples: usize,
}

impl TrainCounters {
    pub fn zero_reward_fraction(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.zero_reward_proposals as f64 / self.proposals as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub objective: Option<ObjectiveKind>,
    pub metrics: Vec<ValMetric>,
    /// Epoch whose model was returned; 0 without validation.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub budget_exhausted: bool,
    /// Token-level compute: 3 per trained token, 1 per sampled token.
    pub work_units: u64,
    pub counters: TrainCounters,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_error,val_nll\n");
        for m in &self.metrics {
            out.push_str(&format!("{},{},{},{}\n", m.epoch, m.train_loss, m.property_error, m.nll));
        }
        out
    }
}

pub struct TrainOutcome {
    pub model: ConditionalLstm,
    pub history: TrainHistory,
    /// Model and work units spent at `snapshot_epoch`, if it was reached.
    pub snapshot: Option<(ConditionalLstm, u64)>,
}

/// True when the latest error exceeds `factor` times the best earlier one.
pub fn early_stop(errors: &[f64], factor: f64) -> bool {
    match errors.split_last() {
        Some((&last, rest)) if !rest.is_empty() => {
            let best = rest.iter().copied().fold(f64::INFINITY, f64::min);
            last > factor * best
        }
        _ => false,
    }
}

/// Fixed validation subset.
pub struct Validator {
    pub examples: Vec<LabeledExample>,
    pub vocab: Vocab,
}

impl Validator {
    pub fn new(valid: &[LabeledExample], vocab: &Vocab, subset: usize) -> Self {
        Validator {
            examples: valid[..subset.min(valid.len())].to_vec(),
            vocab: vocab.clone(),
        }
    }

    pub fn property_error(&self, model: &ConditionalLstm) -> Result<f64, TrainError> {
        if self.examples.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for chunk in self.examples.chunks(500) {
            let conds: Vec<&[f64]> = chunk.iter().map(|e| &e.cond[..]).collect();
            let seqs = model.greedy_batch(&conds, model.config.max_len)?;
            for (s, e) in seqs.iter().zip(chunk) {
                total += match decode(s, &self.vocab).ok().and_then(|x| eval_expr(&x).value()) {
                    Some(v) => (v - e.value as i128).abs() as f64,
                    None => INVALID_DECODE_PENALTY,
                };
            }
        }
        Ok(total / self.examples.len() as f64)
    }

    pub fn evaluate(&self, model: &ConditionalLstm, epoch: usize, train_loss: f64) -> Result<ValMetric, TrainError> {
        let nll = if self.examples.is_empty() {
            0.0
        } else {
            test_nll_per_token(model, &self.examples)?
        };
        Ok(ValMetric {
            epoch,
            train_loss,
            property_error: self.property_error(model)?,
            nll,
        })
    }
}

/// Result of one objective step. `None` from [`Objective::step`] means the
/// batch was skipped and no update is made.
pub struct StepStats {
    pub loss: f64,
    pub work: u64,
}

/// One training objective: accumulates the gradient of its batch loss into
/// the model and reports the loss.
pub trait Objective {
    /// Number of examples one epoch walks over.
    fn epoch_size(&self) -> usize;
    fn step(&mut self, model: &mut ConditionalLstm, rng: &mut ChaCha8Rng, counters: &mut TrainCounters) -> Result<Option<StepStats>, TrainError>;
    /// Serialized description of the last batch, for replay after a failure.
    fn last_batch(&self) -> String;
}

/// Cycles through `0..n` in shuffled order, reshuffling when exhausted.
/// Batches never straddle a reshuffle, so the last batch of a pass may be short.
#[derive(Debug, Clone)]
pub struct IndexStream {
    order: Vec<usize>,
    pos: usize,
}

impl IndexStream {
    pub fn new(n: usize) -> Self {
        IndexStream {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn next_batch(&mut self, b: usize, rng: &mut ChaCha8Rng) -> &[usize] {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let end = (self.pos + b).min(self.order.len());
        let out = &self.order[self.pos..end];
        self.pos = end;
        out
    }
}

fn tokens_of(seqs: &[&[usize]]) -> u64 {
    seqs.iter().map(|s| s.len().saturating_sub(1) as u64).sum()
}

fn batch_json(pairs: &[(String, Vec<f64>)]) -> String {
    serde_json::to_string(pairs).unwrap_or_default()
}

/// Maximum likelihood on `(x_i, y_i)` pairs.
pub struct MlObjective<'a> {
    examples: &'a [LabeledExample],
    stream: IndexStream,
    batch_size: usize,
    last: Vec<usize>,
}

impl<'a> MlObjective<'a> {
    pub fn new(examples: &'a [LabeledExample], batch_size: usize) -> Self {
        MlObjective {
            examples,
            stream: IndexStream::new(examples.len()),
            batch_size,
            last: Vec::new(),
        }
    }
}

impl Objective for MlObjective<'_> {
    fn epoch_size(&self) -> usize {
        self.examples.len()
    }

    fn step(&mut self, model: &mut ConditionalLstm, rng: &mut ChaCha8Rng, _: &mut TrainCounters) -> Result<Option<StepStats>, TrainError> {
        self.last = self.stream.next_batch(self.batch_size, rng).to_vec();
        let seqs: Vec<&[usize]> = self.last.iter().map(|&i| self.examples[i].tokens.tokens()).collect();
        let conds: Vec<&[f64]> = self.last.iter().map(|&i| &self.examples[i].cond[..]).collect();
        let w = vec![1.0 / seqs.len() as f64; seqs.len()];
        let (loss, _) = model.nll_grad(&seqs, &conds, &w)?;
        Ok(Some(StepStats {
            loss,
            work: TRAIN_TOKEN_COST * tokens_of(&seqs),
        }))
    }

    fn last_batch(&self) -> String {
        batch_json(&self.last.iter().map(|&i| (self.examples[i].expr.clone(), self.examples[i].cond.clone())).collect::<Vec<_>>())
    }
}

/// Reward-matched surrogate: targets `y_i` paired with training strings
/// `x_j` drawn from the match index, optionally with a greedy entropy bonus.
pub struct SurrogateObjective<'a> {
    train: &'a [LabeledExample],
    index: &'a MatchIndex,
    sampler: ScalarMatchSampler,
    k: usize,
    batch_size: usize,
    entropy_weight: f64,
    pairs: Option<Vec<MatchedPair>>,
    stream: IndexStream,
    last: Vec<MatchedPair>,
}

impl<'a> SurrogateObjective<'a> {
    /// With `presample_rng`, K pairs per target are drawn once and consumed
    /// `batch_size` pairs per step. Without, each step draws K matches for
    /// each of `batch_size` targets.
    pub fn new(
        train: &'a [LabeledExample],
        index: &'a MatchIndex,
        k: usize,
        batch_size: usize,
        entropy_weight: f64,
        presample_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Self, TrainError> {
        let sampler = ScalarMatchSampler::default();
        let pairs = match presample_rng {
            Some(rng) => Some(presample_training_pairs(&target_values(train), index, k, &sampler, rng)?),
            None => None,
        };
        let n = pairs.as_ref().map_or(train.len(), Vec::len);
        Ok(SurrogateObjective {
            train,
            index,
            sampler,
            k,
            batch_size,
            entropy_weight,
            pairs,
            stream: IndexStream::new(n),
            last: Vec::new(),
        })
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng, counters: &mut TrainCounters) -> Result<Vec<(MatchedPair, f64)>, TrainError> {
        let batch = self.stream.next_batch(self.batch_size, rng).to_vec();
        if let Some(pairs) = &self.pairs {
            let w = 1.0 / batch.len() as f64;
            return Ok(batch.iter().map(|&p| (pairs[p], w)).collect());
        }
        let w = 1.0 / (batch.len() * self.k) as f64;
        let mut out = Vec::with_capacity(batch.len() * self.k);
        for &i in &batch {
            let sources: Vec<usize> = match self.index {
                MatchIndex::Scalar(_) => sample_matches_scalar(self.train[i].value, self.index, self.k, &self.sampler, rng)?,
                MatchIndex::Vector(rows) => {
                    let mut v = Vec::with_capacity(self.k);
                    for _ in 0..self.k {
                        match sample_row(rows, i, rng)? {
                            Some(j) => v.push(j),
                            None => break,
                        }
                    }
                    v
                }
            };
            if sources.is_empty() {
                log::warn!("target {i} has an empty match row, skipped");
                counters.skipped_targets += 1;
            }
            out.extend(sources.into_iter().map(|j| (MatchedPair { source: j, target: i }, w)));
        }
        Ok(out)
    }
}

fn target_values(train: &[LabeledExample]) -> Vec<i64> {
    train.iter().map(|e| e.value).collect()
}

impl Objective for SurrogateObjective<'_> {
    fn epoch_size(&self) -> usize {
        self.train.len()
    }

    fn step(&mut self, model: &mut ConditionalLstm, rng: &mut ChaCha8Rng, counters: &mut TrainCounters) -> Result<Option<StepStats>, TrainError> {
        let drawn = self.draw(rng, counters)?;
        self.last = drawn.iter().map(|d| d.0).collect();
        if drawn.is_empty() {
            return Ok(None);
        }
        let seqs: Vec<&[usize]> = drawn.iter().map(|(p, _)| self.train[p.source].tokens.tokens()).collect();
        let conds: Vec<&[f64]> = drawn.iter().map(|(p, _)| &self.train[p.target].cond[..]).collect();
        let w: Vec<f64> = drawn.iter().map(|d| d.1).collect();
        let (mut loss, _) = model.nll_grad(&seqs, &conds, &w)?;
        let mut work = TRAIN_TOKEN_COST * tokens_of(&seqs);
        if self.entropy_weight > 0.0 {
            let mut targets: Vec<usize> = self.last.iter().map(|p| p.target).collect();
            targets.dedup();
            let tconds: Vec<&[f64]> = targets.iter().map(|&i| &self.train[i].cond[..]).collect();
            let h = entropy_greedy_grad(model, &tconds, -self.entropy_weight / tconds.len() as f64)?;
            loss -= self.entropy_weight * h.iter().sum::<f64>() / h.len() as f64;
            let steps: u64 = h.len() as u64 * model.config.max_len as u64;
            work += (SAMPLE_TOKEN_COST + TRAIN_TOKEN_COST) * steps;
        }
        Ok(Some(StepStats { loss, work }))
    }

    fn last_batch(&self) -> String {
        batch_json(
            &self
                .last
                .iter()
                .map(|p| (self.train[p.source].expr.clone(), self.train[p.target].cond.clone()))
                .collect::<Vec<_>>(),
        )
    }
}

/// Reward of a sampled sequence for target `i`; `None` discards the sample.
pub type SampleReward<'a> = dyn Fn(&TokenSequence, usize) -> Option<f64> + 'a;

/// Score-function gradient: per target, M samples from the model, invalid
/// ones discarded, loss `−(1/B) Σ_i (1/n_i) Σ_k R_ik log p(x_ik | y_i)`.
pub struct ReinforceObjective<'a> {
    conds: Vec<Vec<f64>>,
    reward: Box<SampleReward<'a>>,
    m: usize,
    batch_size: usize,
    stream: IndexStream,
    last: Vec<usize>,
}

impl<'a> ReinforceObjective<'a> {
    pub fn new(conds: Vec<Vec<f64>>, reward: Box<SampleReward<'a>>, m: usize, batch_size: usize) -> Self {
        let n = conds.len();
        ReinforceObjective {
            conds,
            reward,
            m,
            batch_size,
            stream: IndexStream::new(n),
            last: Vec::new(),
        }
    }

    /// Gaussian reward on evaluated expressions with the given inverse
    /// temperature.
    pub fn for_expressions(train: &'a [LabeledExample], vocab: &'a Vocab, lambda: f64, m: usize, batch_size: usize) -> Result<Self, TrainError> {
        let spec = RewardSpec {
            lambda,
            ..RewardSpec::gaussian()
        };
        spec.validate()?;
        let reward = move |s: &TokenSequence, i: usize| {
            let v = eval_expr(&decode(s, vocab).ok()?).value()?;
            spec.reward(&[v as f64], &[train[i].value as f64]).ok()
        };
        Ok(Self::new(train.iter().map(|e| e.cond.clone()).collect(), Box::new(reward), m, batch_size))
    }
}

impl Objective for ReinforceObjective<'_> {
    fn epoch_size(&self) -> usize {
        self.conds.len()
    }

    fn step(&mut self, model: &mut ConditionalLstm, rng: &mut ChaCha8Rng, counters: &mut TrainCounters) -> Result<Option<StepStats>, TrainError> {
        self.last = self.stream.next_batch(self.batch_size, rng).to_vec();
        let b = self.last.len() as f64;
        let conds: Vec<&[f64]> = self.last.iter().flat_map(|&i| std::iter::repeat_n(&self.conds[i][..], self.m)).collect();
        let samples = model.sample_batch(&conds, model.config.max_len, rng)?;
        let mut work = SAMPLE_TOKEN_COST * samples.iter().map(|s| s.len() as u64 - 1).sum::<u64>();
        let mut keep: Vec<(usize, f64)> = Vec::new();
        for (t, &i) in self.last.iter().enumerate() {
            let rows = t * self.m..(t + 1) * self.m;
            let kept: Vec<(usize, f64)> = rows.filter_map(|r| (self.reward)(&samples[r], i).map(|rw| (r, rw))).collect();
            counters.discarded_samples += self.m - kept.len();
            if kept.is_empty() {
                counters.skipped_targets += 1;
                continue;
            }
            let n = kept.len() as f64;
            keep.extend(kept.into_iter().filter(|k| k.1 != 0.0).map(|(r, rw)| (r, rw / (n * b))));
        }
        if keep.is_empty() {
            return Ok(None);
        }
        let seqs: Vec<&[usize]> = keep.iter().map(|k| samples[k.0].tokens()).collect();
        let sconds: Vec<&[f64]> = keep.iter().map(|k| conds[k.0]).collect();
        let w: Vec<f64> = keep.iter().map(|k| k.1).collect();
        let (loss, _) = model.nll_grad(&seqs, &sconds, &w)?;
        work += TRAIN_TOKEN_COST * tokens_of(&seqs);
        Ok(Some(StepStats { loss, work }))
    }

    fn last_batch(&self) -> String {
        serde_json::to_string(&self.last.iter().map(|&i| &self.conds[i]).collect::<Vec<_>>()).unwrap_or_default()
    }
}

/// RAML with importance sampling: K edit-distance proposals per pair,
/// weighted by self-normalized `R(x; y*) / q(x | x*)` within each target.
pub struct RamlIsObjective<'a> {
    train: &'a [LabeledExample],
    vocab: &'a Vocab,
    aug: AugmentConfig,
    reward: RewardSpec,
    k: usize,
    max_len: usize,
    batch_size: usize,
    stream: IndexStream,
    proposal_rng: ChaCha8Rng,
    last: Vec<usize>,
}

impl<'a> RamlIsObjective<'a> {
    pub fn new(
        train: &'a [LabeledExample],
        vocab: &'a Vocab,
        aug: AugmentConfig,
        reward: RewardSpec,
        k: usize,
        max_len: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut proposal_rng = ChaCha8Rng::seed_from_u64(seed);
        proposal_rng.set_stream(3);
        aug.validate().map_err(|_| TrainError::InvalidConfig("augmentation config"))?;
        reward.validate()?;
        Ok(RamlIsObjective {
            train,
            vocab,
            aug,
            reward,
            k,
            max_len,
            batch_size,
            stream: IndexStream::new(train.len()),
            proposal_rng,
            last: Vec::new(),
        })
    }

    /// Proposals for one source with their normalized weights. Proposals
    /// with zero reward are dropped; an empty result means nothing to learn.
    pub fn proposals(&self, source: &LabeledExample, rng: &mut ChaCha8Rng, counters: &mut TrainCounters) -> Vec<(TokenSequence, f64)> {
        let len = source.expr.chars().count();
        let v = self.vocab.chars().len();
        let mut out: Vec<(TokenSequence, f64)> = Vec::with_capacity(self.k);
        for _ in 0..self.k {
            let m = sample_edit_distance(&self.aug, len, v, rng);
            let x = perturb(&source.expr, m, rng, self.vocab.chars()).expect("vocab alphabet is non-empty");
            counters.proposals += 1;
            let r = eval_expr(&x)
                .value()
                .and_then(|fx| self.reward.reward(&[fx as f64], &[source.value as f64]).ok())
                .unwrap_or(0.0);
            let tokens = match encode(&x, self.vocab) {
                Ok(t) if t.len() <= self.max_len => t,
                _ => {
                    counters.zero_reward_proposals += 1;
                    continue;
                }
            };
            if r == 0.0 {
                counters.zero_reward_proposals += 1;
                continue;
            }
            out.push((tokens, r.ln() - proposal_log_q(&self.aug, m, len, v)));
        }
        normalize_log_weights(&mut out);
        out
    }
}

/// Turns log weights into probabilities in place.
pub fn normalize_log_weights<T>(items: &mut [(T, f64)]) {
    let max = items.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = items.iter().map(|x| (x.1 - max).exp()).sum();
    for x in items.iter_mut() {
        x.1 = (x.1 - max).exp() / total;
    }
}

impl Objective for RamlIsObjective<'_> {
    fn epoch_size(&self) -> usize {
        self.train.len()
    }

    fn step(&mut self, model: &mut ConditionalLstm, rng: &mut ChaCha8Rng, counters: &mut TrainCounters) -> Result<Option<StepStats>, TrainError> {
        self.last = self.stream.next_batch(self.batch_size, rng).to_vec();
        let b = self.last.len() as f64;
        let mut seqs: Vec<TokenSequence> = Vec::new();
        let mut conds: Vec<&[f64]> = Vec::new();
        let mut w = Vec::new();
        let mut prng = self.proposal_rng.clone();
        for &i in &self.last {
            let props = self.proposals(&self.train[i], &mut prng, counters);
            if props.is_empty() {
                counters.skipped_targets += 1;
            }
            for (s, p) in props {
                seqs.push(s);
                conds.push(&self.train[i].cond);
                w.push(p / b);
            }
        }
        self.proposal_rng = prng;
        if seqs.is_empty() {
            return Ok(None);
        }
        let refs: Vec<&[usize]> = seqs.iter().map(|s| s.tokens()).collect();
        let (loss, _) = model.nll_grad(&refs, &conds, &w)?;
        Ok(Some(StepStats {
            loss,
            work: TRAIN_TOKEN_COST * tokens_of(&refs),
        }))
    }

    fn last_batch(&self) -> String {
        batch_json(&self.last.iter().map(|&i| (self.train[i].expr.clone(), self.train[i].cond.clone())).collect::<Vec<_>>())
    }
}

/// The shared loop. Starts from `model` as given (fresh or warm), runs up
/// to `max_epochs` epochs and returns the best-validation model, or the
/// final one without a validator.
pub fn run_training(
    mut model: ConditionalLstm,
    objective: &mut dyn Objective,
    cfg: &TrainConfig,
    validator: Option<&Validator>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let adam = cfg.adam();
    let steps = cfg.steps_for(objective.epoch_size());
    let mut history = TrainHistory {
        objective: Some(cfg.objective),
        ..TrainHistory::default()
    };
    let mut best: Option<(f64, ConditionalLstm)> = None;
    let mut snapshot = None;
    'epochs: for epoch in 1..=cfg.max_epochs {
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        let mut out_of_budget = false;
        for step in 0..steps {
            model.params.zero_grad();
            let Some(stats) = objective.step(&mut model, &mut rng, &mut history.counters)? else {
                history.counters.skipped_batches += 1;
                continue;
            };
            let fail = || TrainError::NonFinite {
                epoch,
                step,
                batch: objective.last_batch(),
            };
            if !stats.loss.is_finite() {
                return Err(fail());
            }
            model.params.clip_grad_norm(cfg.clip_norm);
            model.params.adam_step(&adam).map_err(|_| fail())?;
            history.counters.steps += 1;
            history.work_units += stats.work;
            loss_sum += stats.loss;
            loss_n += 1;
            if cfg.work_budget.is_some_and(|b| history.work_units >= b) {
                out_of_budget = true;
                break;
            }
        }
        let train_loss = if loss_n == 0 { f64::NAN } else { loss_sum / loss_n as f64 };
        if cfg.snapshot_epoch == Some(epoch) {
            snapshot = Some((model.clone(), history.work_units));
        }
        if let Some(v) = validator {
            let metric = v.evaluate(&model, epoch, train_loss)?;
            log::info!(
                "{} epoch {epoch}: loss {train_loss:.4} val_error {:.3} val_nll {:.4}",
                cfg.objective.name(),
                metric.property_error,
                metric.nll
            );
            history.metrics.push(metric);
            if best.as_ref().is_none_or(|b| metric.property_error < b.0) {
                best = Some((metric.property_error, model.clone()));
                history.best_epoch = epoch;
            }
            let errors: Vec<f64> = history.metrics.iter().map(|m| m.property_error).collect();
            if early_stop(&errors, cfg.early_stop_factor) {
                history.stopped_early = true;
                break 'epochs;
            }
        } else {
            history.metrics.push(ValMetric {
                epoch,
                train_loss,
                property_error: 0.0,
                nll: 0.0,
            });
        }
        if out_of_budget {
            history.budget_exhausted = true;
            break;
        }
    }
    let model = match best {
        Some((_, m)) => m,
        None => model,
    };
    Ok(TrainOutcome { model, history, snapshot })
}

fn fresh_model(model_config: ModelConfig, seed: u64) -> Result<ConditionalLstm, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    Ok(ConditionalLstm::new(model_config, &mut rng)?)
}

fn validator(splits: &DatasetSplits, cfg: &TrainConfig) -> Validator {
    Validator::new(&splits.valid, &splits.vocab, cfg.val_subset)
}

/// Maximum likelihood on the training split.
pub fn train_ml(splits: &DatasetSplits, model_config: ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_ml_on(&splits.train, splits, model_config, cfg)
}

/// Maximum likelihood on an arbitrary example set (e.g. an augmented one),
/// validated on the splits' validation set.
pub fn train_ml_on(examples: &[LabeledExample], splits: &DatasetSplits, model_config: ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut obj = MlObjective::new(examples, cfg.batch_size);
    run_training(fresh_model(model_config, cfg.seed)?, &mut obj, cfg, Some(&validator(splits, cfg)))
}

/// Surrogate objective, with the greedy entropy term when
/// `cfg.entropy_weight > 0`.
pub fn train_surrogate(splits: &DatasetSplits, index: &MatchIndex, model_config: ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut pre = ChaCha8Rng::seed_from_u64(cfg.seed);
    pre.set_stream(2);
    let mut obj = SurrogateObjective::new(
        &splits.train,
        index,
        cfg.samples_per_target,
        cfg.batch_size,
        cfg.entropy_weight,
        cfg.presampled.then_some(&mut pre),
    )?;
    run_training(fresh_model(model_config, cfg.seed)?, &mut obj, cfg, Some(&validator(splits, cfg)))
}

/// REINFORCE from a warm-start model. Adam moments are reset.
pub fn train_reinforce(splits: &DatasetSplits, warm_start: ConditionalLstm, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut model = warm_start;
    reset_optimizer(&mut model);
    let mut obj = ReinforceObjective::for_expressions(&splits.train, &splits.vocab, cfg.reinforce_temperature, cfg.reinforce_samples, cfg.batch_size)?;
    run_training(model, &mut obj, cfg, Some(&validator(splits, cfg)))
}

pub fn train_raml_is(
    splits: &DatasetSplits,
    aug: &AugmentConfig,
    reward: RewardSpec,
    model_config: ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let mut obj = RamlIsObjective::new(&splits.train, &splits.vocab, *aug, reward, cfg.samples_per_target, model_config.max_len, cfg.batch_size, cfg.seed)?;
    run_training(fresh_model(model_config, cfg.seed)?, &mut obj, cfg, Some(&validator(splits, cfg)))
}

pub fn reset_optimizer(model: &mut ConditionalLstm) {
    model.params.step = 0;
    for p in &mut model.params.params {
        p.m.iter_mut().for_each(|x| *x = 0.0);
        p.v.iter_mut().for_each(|x| *x = 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{START, STOP};
    use crate::reward::build_scalar_index;

    fn tiny_config(vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: 4,
            cond_dim: 1,
            hidden_dim: 8,
            num_layers: 2,
            max_len: 10,
        }
    }

    fn examples(exprs: &[&str]) -> Vec<LabeledExample> {
        let v = Vocab::expression();
        exprs
            .iter()
            .map(|s| LabeledExample::scalar(s.to_string(), eval_expr(s).value().unwrap() as i64, &v).unwrap())
            .collect()
    }

    #[test]
    fn early_stop_examples() {
        assert!(!early_stop(&[10.0, 9.0, 8.0], 2.0));
        assert!(early_stop(&[10.0, 9.0, 8.0, 17.0], 2.0));
        assert!(early_stop(&[10.0, 21.0], 2.0));
        assert!(!early_stop(&[10.0, 20.0], 2.0));
        assert!(!early_stop(&[10.0], 2.0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { early_stop_factor: 1.0, ..Default::default() },
            TrainConfig { entropy_weight: -1e-3, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
        }
        assert_eq!(ObjectiveKind::parse("surrogate_entropy"), Some(ObjectiveKind::SurrogateEntropy));
        assert_eq!(ObjectiveKind::parse("raml-is").map(ObjectiveKind::name), Some("raml-is"));
    }

    #[test]
    fn index_stream_covers_each_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = IndexStream::new(7);
        let mut seen: Vec<usize> = Vec::new();
        for _ in 0..3 {
            seen.extend_from_slice(s.next_batch(3, &mut rng));
        }
        assert_eq!(seen.len(), 7);
        seen.sort();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn memorizes_single_example() {
        let v = Vocab::expression();
        let ex = examples(&["12*3"]);
        let cfg = TrainConfig {
            batch_size: 1,
            max_epochs: 200,
            lr: 0.03,
            ..Default::default()
        };
        let mut obj = MlObjective::new(&ex, 1);
        let capacity = ModelConfig { hidden_dim: 16, ..tiny_config(&v) };
        let out = run_training(fresh_model(capacity, 1).unwrap(), &mut obj, &cfg, None).unwrap();
        let nll = test_nll_per_token(&out.model, &ex).unwrap();
        assert!(nll < 0.01, "nll {nll}");
    }

    #[test]
    fn non_finite_loss_reports_batch() {
        let v = Vocab::expression();
        let ex = examples(&["1+1"]);
        let mut model = fresh_model(tiny_config(&v), 1).unwrap();
        model.params.params[0].value[0] = f64::NAN;
        let e = model.params.params[0].value.len();
        for k in 0..e {
            model.params.params[0].value[k] = f64::NAN;
        }
        let mut obj = MlObjective::new(&ex, 1);
        let cfg = TrainConfig { max_epochs: 1, ..Default::default() };
        match run_training(model, &mut obj, &cfg, None) {
            Err(TrainError::NonFinite { batch, .. }) => assert!(batch.contains("1+1")),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("NaN parameters trained"),
        }
    }

    #[test]
    fn degenerate_surrogate_matches_ml_trajectory() {
        let v = Vocab::expression();
        // Distinct values so each target's bucket holds only itself; sigma 0
        // is emulated by values spaced far apart.
        let ex = examples(&["1", "100", "0-50", "300", "7*80", "999-0"]);
        let index = build_scalar_index(&target_values(&ex));
        let cfg = TrainConfig { batch_size: 2, max_epochs: 3, ..Default::default() };
        let mut ml = MlObjective::new(&ex, 2);
        let ml_out = run_training(fresh_model(tiny_config(&v), 3).unwrap(), &mut ml, &cfg, None).unwrap();
        let mut pre = ChaCha8Rng::seed_from_u64(9);
        let mut sur = SurrogateObjective::new(&ex, &index, 1, 2, 0.0, Some(&mut pre)).unwrap();
        // A unit-sigma draw lands in the own bucket unless it strays by 0.5;
        // with empty neighbours the nearest non-empty bucket is the own one.
        assert!(sur.pairs.as_ref().unwrap().iter().all(|p| p.source == p.target));
        let sur_out = run_training(fresh_model(tiny_config(&v), 3).unwrap(), &mut sur, &cfg, None).unwrap();
        assert_eq!(ml_out.model.params, sur_out.model.params);
        for (a, b) in ml_out.history.metrics.iter().zip(&sur_out.history.metrics) {
            assert!((a.train_loss - b.train_loss).abs() < 1e-12);
        }
    }

    #[test]
    fn on_the_fly_gradient_is_mean_of_pair_gradients() {
        let v = Vocab::expression();
        let ex = examples(&["1+2", "3", "2+1", "4-1", "9"]);
        let index = build_scalar_index(&target_values(&ex));
        let k = 4;
        let mut obj = SurrogateObjective::new(&ex, &index, k, 2, 0.0, None).unwrap();
        let mut model = fresh_model(tiny_config(&v), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counters = TrainCounters::default();
        model.params.zero_grad();
        let stats = obj.step(&mut model, &mut rng, &mut counters).unwrap().unwrap();
        let pairs = obj.last.clone();
        assert_eq!(pairs.len(), 2 * k);
        // Hand accumulation: one pair at a time, unit weight, then scaled.
        let mut manual = model.clone();
        manual.params.zero_grad();
        let mut total = 0.0;
        for p in &pairs {
            let mut single = model.clone();
            single.params.zero_grad();
            let (l, _) = single.nll_grad(&[ex[p.source].tokens.tokens()], &[&ex[p.target].cond], &[1.0]).unwrap();
            total += l;
            for (acc, g) in manual.params.params.iter_mut().zip(&single.params.params) {
                for (a, b) in acc.grad.iter_mut().zip(&g.grad) {
                    *a += b / (2 * k) as f64;
                }
            }
        }
        assert!((stats.loss - total / (2 * k) as f64).abs() < 1e-12);
        for (a, b) in model.params.params.iter().zip(&manual.params.params) {
            for (x, y) in a.grad.iter().zip(&b.grad) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn zero_entropy_weight_is_plain_surrogate() {
        let v = Vocab::expression();
        let ex = examples(&["1+2", "3", "2+1", "4-1", "9"]);
        let index = build_scalar_index(&target_values(&ex));
        let cfg = TrainConfig { batch_size: 2, max_epochs: 2, ..Default::default() };
        let run = |w: f64| {
            let mut pre = ChaCha8Rng::seed_from_u64(1);
            let mut obj = SurrogateObjective::new(&ex, &index, 3, 2, w, Some(&mut pre)).unwrap();
            run_training(fresh_model(tiny_config(&v), 2).unwrap(), &mut obj, &cfg, None).unwrap()
        };
        assert_eq!(run(0.0).model.params, run(0.0).model.params);
        assert_ne!(run(0.0).model.params, run(0.01).model.params);
    }

    #[test]
    fn zero_reward_leaves_parameters() {
        let v = Vocab::expression();
        let model = fresh_model(tiny_config(&v), 4).unwrap();
        let mut obj = ReinforceObjective::new(vec![vec![0.1]; 4], Box::new(|_: &TokenSequence, _| Some(0.0)), 5, 2);
        let cfg = TrainConfig { batch_size: 2, max_epochs: 2, ..Default::default() };
        let out = run_training(model.clone(), &mut obj, &cfg, None).unwrap();
        assert_eq!(out.model.params, model.params);
        assert_eq!(out.history.counters.skipped_batches, 4);
    }

    #[test]
    fn bandit_learns_rewarded_token() {
        let cfg_m = ModelConfig {
            vocab_size: 4,
            embed_dim: 2,
            cond_dim: 1,
            hidden_dim: 4,
            num_layers: 1,
            max_len: 2,
        };
        let model = fresh_model(cfg_m, 0).unwrap();
        let reward = |s: &TokenSequence, _: usize| Some(if s.tokens()[1] == STOP { 1.0 } else { 0.0 });
        let mut obj = ReinforceObjective::new(vec![vec![0.0]], Box::new(reward), 8, 1);
        let cfg = TrainConfig {
            max_epochs: 500,
            lr: 0.01,
            ..Default::default()
        };
        let out = run_training(model, &mut obj, &cfg, None).unwrap();
        let p = out.model.step_distribution(&[START], &[0.0]).unwrap();
        assert!(p[STOP] > 0.9, "p = {p:?}");
    }

    #[test]
    fn raml_is_with_zero_edits_is_ml() {
        let v = Vocab::expression();
        let ex = examples(&["1+2", "30", "2*41", "4-1"]);
        let aug = AugmentConfig { tau: 1e-9, ..Default::default() };
        let cfg = TrainConfig { batch_size: 2, max_epochs: 2, ..Default::default() };
        let mut raml = RamlIsObjective::new(&ex, &v, aug, RewardSpec::gaussian(), 3, 10, 2, 0).unwrap();
        let a = run_training(fresh_model(tiny_config(&v), 6).unwrap(), &mut raml, &cfg, None).unwrap();
        let mut ml = MlObjective::new(&ex, 2);
        let b = run_training(fresh_model(tiny_config(&v), 6).unwrap(), &mut ml, &cfg, None).unwrap();
        // Three identical proposals with weight 1/3 each sum to the same
        // gradient up to rounding.
        for (pa, pb) in a.model.params.params.iter().zip(&b.model.params.params) {
            for (x, y) in pa.value.iter().zip(&pb.value) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        assert_eq!(a.history.counters.zero_reward_proposals, 0);
    }

    #[test]
    fn raml_weights_normalized_per_target() {
        let v = Vocab::expression();
        let ex = examples(&["12+34"]);
        let obj = RamlIsObjective::new(&ex, &v, AugmentConfig::default(), RewardSpec::l1(0.1, 1000.0).unwrap(), 20, 12, 1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = TrainCounters::default();
        for _ in 0..20 {
            let p = obj.proposals(&ex[0], &mut rng, &mut c);
            if !p.is_empty() {
                assert!((p.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(c.proposals, 400);
        assert!(c.zero_reward_fraction() > 0.0);
    }
}
