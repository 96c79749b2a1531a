//! Sequence-entropy estimators for the conditional model.
//!
//! Every trajectory is a run of generated tokens ending at STOP or after
//! `max_len - 1` tokens; a truncated prefix counts as its own terminal event.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{START, STOP};
use crate::model::{argmax, sample_index, ConditionalLstm, DecodeState, ModelError};
use crate::nn::ops::{entropy, softmax, softmax_entropy_grad};

/// Enumeration refuses models with more tree nodes than this.
pub const ENUM_LIMIT: u64 = 1_000_000;

#[derive(Debug, thiserror::Error)]
pub enum EntropyError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("enumeration would visit {nodes} prefixes, limit is {limit}")]
    DomainTooLarge { nodes: u64, limit: u64 },
    #[error("sample count must be at least 1")]
    ZeroSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "mc_A")]
    McA,
    #[serde(rename = "decomposed_B")]
    DecomposedB,
    #[serde(rename = "greedy")]
    Greedy,
    #[serde(rename = "straight_through")]
    StraightThrough,
    #[serde(rename = "exact_enum")]
    ExactEnum,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::McA,
        EstimatorKind::DecomposedB,
        EstimatorKind::Greedy,
        EstimatorKind::StraightThrough,
        EstimatorKind::ExactEnum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::McA => "mc_A",
            EstimatorKind::DecomposedB => "decomposed_B",
            EstimatorKind::Greedy => "greedy",
            EstimatorKind::StraightThrough => "straight_through",
            EstimatorKind::ExactEnum => "exact_enum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_stochastic(self) -> bool {
        matches!(self, EstimatorKind::McA | EstimatorKind::DecomposedB)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    /// Nats.
    pub value: f64,
    pub estimator: EstimatorKind,
    pub sample_count: usize,
    /// Standard error of the mean for sampled estimators.
    pub std_error: Option<f64>,
    /// Expected number of generated steps the value was summed over.
    pub steps: f64,
}

/// Number of prefixes the enumeration walks.
pub fn enumeration_size(vocab: usize, max_len: usize) -> u64 {
    let branch = (vocab - 1) as u64;
    let mut total: u64 = 0;
    let mut level: u64 = 1;
    for _ in 0..max_len {
        total = total.saturating_add(level);
        level = level.saturating_mul(branch);
    }
    total
}

fn check_enumerable(model: &ConditionalLstm) -> Result<(), EntropyError> {
    let nodes = enumeration_size(model.config.vocab_size, model.config.max_len);
    if nodes > ENUM_LIMIT {
        return Err(EntropyError::DomainTooLarge { nodes, limit: ENUM_LIMIT });
    }
    Ok(())
}

/// Depth-first walk of the generation tree. `node(prob, dist, depth)` is
/// called for every live prefix, `truncated(prob)` for prefixes that hit
/// the length limit.
fn walk<N, L>(model: &ConditionalLstm, cond: &[f64], mut node: N, mut truncated: L) -> Result<(), EntropyError>
where
    N: FnMut(f64, &[f64], usize),
    L: FnMut(f64),
{
    check_enumerable(model)?;
    let max_gen = model.config.max_len - 1;
    let mut state = model.start_state();
    let dist = model.advance(&mut state, START, cond)?;
    // explicit stack: (state, distribution, prefix probability, generated tokens)
    let mut stack: Vec<(DecodeState, Vec<f64>, f64, usize)> = vec![(state, dist, 1.0, 0)];
    while let Some((state, dist, prob, depth)) = stack.pop() {
        node(prob, &dist, depth);
        for tok in 0..dist.len() {
            if tok == STOP {
                continue;
            }
            let p = prob * dist[tok];
            if depth + 1 == max_gen {
                truncated(p);
            } else {
                let mut s = state.clone();
                let d = model.advance(&mut s, tok, cond)?;
                stack.push((s, d, p, depth + 1));
            }
        }
    }
    Ok(())
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// `−Σ p(x) log p(x)` over every terminal event.
pub fn entropy_exact_enum(model: &ConditionalLstm, cond: &[f64]) -> Result<EntropyEstimate, EntropyError> {
    let (mut stopped, mut cut) = (0.0, 0.0);
    let mut steps = 0.0;
    walk(
        model,
        cond,
        |prob, dist, _| {
            stopped -= plogp(prob * dist[STOP]);
            steps += prob;
        },
        |prob| cut -= plogp(prob),
    )?;
    Ok(EntropyEstimate {
        value: stopped + cut,
        estimator: EstimatorKind::ExactEnum,
        sample_count: 0,
        std_error: None,
        steps,
    })
}

/// The chain-rule decomposition with every prefix expectation taken
/// exactly: `Σ_prefix P(prefix) · H[p(· | prefix)]`.
pub fn entropy_decomposed_exhaustive(model: &ConditionalLstm, cond: &[f64]) -> Result<f64, EntropyError> {
    let mut h = 0.0;
    walk(model, cond, |prob, dist, _| h += prob * entropy(dist), |_| {})?;
    Ok(h)
}

/// Every terminal event as `(tokens, log p)`; tokens start with START and
/// end with STOP unless truncated.
pub fn enumerate_events(model: &ConditionalLstm, cond: &[f64]) -> Result<Vec<(Vec<usize>, f64)>, EntropyError> {
    check_enumerable(model)?;
    let max_gen = model.config.max_len - 1;
    let mut out = Vec::new();
    let mut state = model.start_state();
    let dist = model.advance(&mut state, START, cond)?;
    let mut stack = vec![(state, dist, vec![START], 0.0f64)];
    while let Some((state, dist, prefix, logp)) = stack.pop() {
        for tok in 0..dist.len() {
            let mut seq = prefix.clone();
            seq.push(tok);
            let lp = logp + dist[tok].ln();
            if tok == STOP || seq.len() - 1 == max_gen {
                out.push((seq, lp));
            } else {
                let mut s = state.clone();
                let d = model.advance(&mut s, tok, cond)?;
                stack.push((s, d, seq, lp));
            }
        }
    }
    Ok(out)
}

/// Per-trajectory sums for `s` ancestral samples: `(−log p, Σ_t H_t, steps)`.
fn sample_trajectories<R: Rng + ?Sized>(
    model: &ConditionalLstm,
    cond: &[f64],
    s: usize,
    rng: &mut R,
) -> Result<Vec<(f64, f64, usize)>, EntropyError> {
    if s == 0 {
        return Err(EntropyError::ZeroSamples);
    }
    let mut acc = vec![(0.0, 0.0, 0usize); s];
    let conds = vec![cond; s];
    model.decode_batch(&conds, model.config.max_len, |row, p| {
        let u: f64 = rng.random();
        let tok = sample_index(p, u);
        acc[row].0 -= p[tok].ln();
        acc[row].1 += entropy(p);
        acc[row].2 += 1;
        tok
    })?;
    Ok(acc)
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Estimator A: mean negative log-probability of `s` sampled trajectories.
pub fn entropy_mc_a<R: Rng + ?Sized>(model: &ConditionalLstm, cond: &[f64], s: usize, rng: &mut R) -> Result<EntropyEstimate, EntropyError> {
    let traj = sample_trajectories(model, cond, s, rng)?;
    let vals: Vec<f64> = traj.iter().map(|t| t.0).collect();
    let (value, se) = mean_and_se(&vals);
    Ok(EntropyEstimate {
        value,
        estimator: EstimatorKind::McA,
        sample_count: s,
        std_error: Some(se),
        steps: traj.iter().map(|t| t.2 as f64).sum::<f64>() / s as f64,
    })
}

/// Estimator B: closed-form first-step entropy plus per-step closed-form
/// entropies averaged over `s` sampled prefixes. Trajectories that stopped
/// contribute nothing to later steps.
pub fn entropy_decomposed_b<R: Rng + ?Sized>(model: &ConditionalLstm, cond: &[f64], s: usize, rng: &mut R) -> Result<EntropyEstimate, EntropyError> {
    let traj = sample_trajectories(model, cond, s, rng)?;
    let vals: Vec<f64> = traj.iter().map(|t| t.1).collect();
    let (value, se) = mean_and_se(&vals);
    Ok(EntropyEstimate {
        value,
        estimator: EstimatorKind::DecomposedB,
        sample_count: s,
        std_error: Some(se),
        steps: traj.iter().map(|t| t.2 as f64).sum::<f64>() / s as f64,
    })
}

/// Greedy-prefix entropy: closed-form step entropies along the argmax
/// unroll, up to and including the step where STOP is chosen.
pub fn entropy_greedy(model: &ConditionalLstm, cond: &[f64]) -> Result<EntropyEstimate, EntropyError> {
    let mut h = 0.0;
    let mut steps = 0;
    model.decode_batch(&[cond], model.config.max_len, |_, p| {
        h += entropy(p);
        steps += 1;
        argmax(p)
    })?;
    Ok(EntropyEstimate {
        value: h,
        estimator: EstimatorKind::Greedy,
        sample_count: 0,
        std_error: None,
        steps: steps as f64,
    })
}

/// Adds `weight · ∇ H_greedy(cond_i)` into the parameter gradients for every
/// row, holding each greedy prefix fixed. Returns the per-row entropies.
pub fn entropy_greedy_grad(model: &mut ConditionalLstm, conds: &[&[f64]], weight: f64) -> Result<Vec<f64>, EntropyError> {
    let seqs = model.greedy_batch(conds, model.config.max_len)?;
    let inputs: Vec<&[usize]> = seqs.iter().map(|s| &s.0[..s.0.len() - 1]).collect();
    let tape = model.forward(&inputs, conds)?;
    let d = model.config.vocab_size;
    let mut dlogits = tape.zero_dlogits();
    let mut h = vec![0.0; conds.len()];
    for t in 0..tape.num_steps() {
        let logits = tape.logits_at(t);
        for pos in 0..tape.rows_at(t) {
            let r = pos * d..(pos + 1) * d;
            h[tape.row_id(pos)] += softmax_entropy_grad(&logits[r.clone()], weight, &mut dlogits[t][r]);
        }
    }
    model.backward(&tape, dlogits)?;
    Ok(h)
}

/// Straight-through unroll: per-step entropies `H_t` weighted by the
/// probability `w_t = Π_{s<t} (1 − π_s)` that STOP has not been emitted,
/// with `π_s` the STOP probability at step `s`.
pub fn entropy_straight_through(model: &ConditionalLstm, cond: &[f64]) -> Result<EntropyEstimate, EntropyError> {
    let tape = model.forward_soft(cond)?;
    let (mut h, mut alive, mut steps) = (0.0, 1.0, 0.0);
    for t in 0..tape.num_steps() {
        let p = softmax(tape.logits_at(t));
        h += alive * entropy(&p);
        steps += alive;
        alive *= 1.0 - p[STOP];
    }
    Ok(EntropyEstimate {
        value: h,
        estimator: EstimatorKind::StraightThrough,
        sample_count: 0,
        std_error: None,
        steps,
    })
}

/// Adds `weight · ∇ H_st(cond)` into the parameter gradients and returns the
/// estimate.
pub fn entropy_straight_through_grad(model: &mut ConditionalLstm, cond: &[f64], weight: f64) -> Result<f64, EntropyError> {
    let tape = model.forward_soft(cond)?;
    let n = tape.num_steps();
    let probs: Vec<Vec<f64>> = (0..n).map(|t| softmax(tape.logits_at(t))).collect();
    let hs: Vec<f64> = probs.iter().map(|p| entropy(p)).collect();
    let mut w = vec![1.0; n];
    for t in 1..n {
        w[t] = w[t - 1] * (1.0 - probs[t - 1][STOP]);
    }
    // tail[t] = Σ_{u>t} H_u Π_{t<s<u} (1 − π_s)
    let mut tail = vec![0.0; n];
    for t in (0..n.saturating_sub(1)).rev() {
        tail[t] = hs[t + 1] + (1.0 - probs[t + 1][STOP]) * tail[t + 1];
    }
    let mut dlogits = tape.zero_dlogits();
    for t in 0..n {
        softmax_entropy_grad(tape.logits_at(t), weight * w[t], &mut dlogits[t]);
        let coef = -weight * w[t] * tail[t] * probs[t][STOP];
        for (k, g) in dlogits[t].iter_mut().enumerate() {
            *g += coef * ((k == STOP) as u8 as f64 - probs[t][k]);
        }
    }
    model.backward(&tape, dlogits)?;
    Ok(hs.iter().zip(&w).map(|(h, w)| h * w).sum())
}

/// One estimate of the requested kind. `s` and `rng` are ignored by the
/// deterministic estimators.
pub fn estimate<R: Rng + ?Sized>(
    kind: EstimatorKind,
    model: &ConditionalLstm,
    cond: &[f64],
    s: usize,
    rng: &mut R,
) -> Result<EntropyEstimate, EntropyError> {
    match kind {
        EstimatorKind::McA => entropy_mc_a(model, cond, s, rng),
        EstimatorKind::DecomposedB => entropy_decomposed_b(model, cond, s, rng),
        EstimatorKind::Greedy => entropy_greedy(model, cond),
        EstimatorKind::StraightThrough => entropy_straight_through(model, cond),
        EstimatorKind::ExactEnum => entropy_exact_enum(model, cond),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub estimators: Vec<EstimatorKind>,
    pub sample_sizes: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            estimators: vec![
                EstimatorKind::McA,
                EstimatorKind::DecomposedB,
                EstimatorKind::Greedy,
                EstimatorKind::StraightThrough,
            ],
            sample_sizes: vec![1, 10, 50],
            trials: 15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub estimator: EstimatorKind,
    pub s: usize,
    pub trial: usize,
    pub target: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub estimator: EstimatorKind,
    pub s: usize,
    pub target: usize,
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub summary: Vec<BenchSummary>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("estimator,S,trial,target,value\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.estimator.name(), r.s, r.trial, r.target, r.value));
        }
        out
    }

    pub fn summary_for(&self, kind: EstimatorKind, s: usize, target: usize) -> Option<&BenchSummary> {
        self.summary.iter().find(|x| x.estimator == kind && x.s == s && x.target == target)
    }
}

/// Sample standard deviation (n − 1); 0 for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Repeats each estimator `trials` times for every target and sample size.
/// Sampled estimators at the same `(target, S, trial)` share a seed.
pub fn entropy_bench(model: &ConditionalLstm, targets: &[Vec<f64>], cfg: &BenchConfig) -> Result<BenchReport, EntropyError> {
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (ti, cond) in targets.iter().enumerate() {
        for &s in &cfg.sample_sizes {
            for &kind in &cfg.estimators {
                let mut vals = Vec::with_capacity(cfg.trials);
                let fixed = if kind.is_stochastic() {
                    None
                } else {
                    Some(estimate(kind, model, cond, s, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?.value)
                };
                for trial in 0..cfg.trials {
                    let value = match fixed {
                        Some(v) => v,
                        None => {
                            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                            rng.set_stream(((ti as u64) << 40) | ((s as u64) << 20) | trial as u64);
                            estimate(kind, model, cond, s, &mut rng)?.value
                        }
                    };
                    vals.push(value);
                    rows.push(BenchRow {
                        estimator: kind,
                        s,
                        trial,
                        target: ti,
                        value,
                    });
                }
                summary.push(BenchSummary {
                    estimator: kind,
                    s,
                    target: ti,
                    mean: vals.iter().sum::<f64>() / vals.len().max(1) as f64,
                    std: sample_std(&vals),
                    trials: cfg.trials,
                });
            }
        }
    }
    Ok(BenchReport { rows, summary })
}
