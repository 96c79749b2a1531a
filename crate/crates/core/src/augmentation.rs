//! Edit-distance perturbations of expression strings: the proposal used by
//! RAML-style training, classic and RAML-like data augmentation, and the
//! edit sensitivity study.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledExample, Vocab};
use crate::evaluator::eval_expr;

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(&'static str),
    #[error("empty alphabet")]
    EmptyAlphabet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// `p(m) ∝ exp(−m/τ)`.
    Exponential,
    /// `p(m) ∝ C(len, m)·(V − 1)^m·exp(−m/τ)`.
    CountWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub tau: f64,
    pub max_edit_distance: usize,
    pub distance_mode: DistanceMode,
    pub per_instance_target: usize,
    pub max_attempts: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            tau: 0.745,
            max_edit_distance: 5,
            distance_mode: DistanceMode::Exponential,
            per_instance_target: 10,
            max_attempts: 500,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.tau > 0.0) {
            return Err(AugmentError::InvalidConfig("tau must be positive"));
        }
        if self.max_edit_distance == 0 {
            return Err(AugmentError::InvalidConfig("max_edit_distance must be at least 1"));
        }
        Ok(())
    }
}

fn ln_choose(n: usize, k: usize) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// Log of the approximate number of strings at edit distance `m`:
/// substitutions only, `C(len, m)·(V − 1)^m`.
pub fn ln_neighbourhood(m: usize, seq_len: usize, vocab_size: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    ln_choose(seq_len, m) + m as f64 * ((vocab_size.max(2) - 1) as f64).ln()
}

/// `p(m)` for `m = 0..=max_edit_distance`. This is the calibration report:
/// element 0 is the probability of proposing the source unchanged.
pub fn edit_distance_distribution(cfg: &AugmentConfig, seq_len: usize, vocab_size: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..=cfg.max_edit_distance)
        .map(|m| {
            let base = -(m as f64) / cfg.tau;
            match cfg.distance_mode {
                DistanceMode::Exponential => base,
                DistanceMode::CountWeighted => base + ln_neighbourhood(m, seq_len, vocab_size),
            }
        })
        .collect();
    let max = logits.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

pub fn sample_edit_distance<R: Rng + ?Sized>(cfg: &AugmentConfig, seq_len: usize, vocab_size: usize, rng: &mut R) -> usize {
    let p = edit_distance_distribution(cfg, seq_len, vocab_size);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (m, q) in p.iter().enumerate() {
        acc += q;
        if u < acc {
            return m;
        }
    }
    p.iter().rposition(|&q| q > 0.0).unwrap_or(0)
}

/// Approximate proposal log-probability of a string produced with `m`
/// edits: `log p(m) − log n(m)`.
pub fn proposal_log_q(cfg: &AugmentConfig, m: usize, seq_len: usize, vocab_size: usize) -> f64 {
    let p = edit_distance_distribution(cfg, seq_len, vocab_size);
    p[m].ln() - ln_neighbourhood(m, seq_len, vocab_size)
}

/// Applies `m` uniformly chosen single-character edits. Substitutions always
/// change the character; deletions on an empty string become inserts.
/// Edits may cancel, so the result is within distance `m` of `s`.
pub fn perturb<R: Rng + ?Sized>(s: &str, m: usize, rng: &mut R, alphabet: &[char]) -> Result<String, AugmentError> {
    if alphabet.is_empty() {
        return Err(AugmentError::EmptyAlphabet);
    }
    let mut chars: Vec<char> = s.chars().collect();
    for _ in 0..m {
        let op = if chars.is_empty() { 0 } else { rng.random_range(0..3) };
        match op {
            0 => {
                let at = rng.random_range(0..=chars.len());
                chars.insert(at, alphabet[rng.random_range(0..alphabet.len())]);
            }
            1 => {
                chars.remove(rng.random_range(0..chars.len()));
            }
            _ => {
                let at = rng.random_range(0..chars.len());
                let others: Vec<char> = alphabet.iter().copied().filter(|&c| c != chars[at]).collect();
                if !others.is_empty() {
                    chars[at] = others[rng.random_range(0..others.len())];
                }
            }
        }
    }
    Ok(chars.into_iter().collect())
}

/// A perturbed expression with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedExample {
    pub example: LabeledExample,
    /// Index of the training example it was derived from.
    pub source: usize,
    pub edit_distance: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSet {
    pub originals: Vec<LabeledExample>,
    pub added: Vec<AugmentedExample>,
    /// Valid strings still missing when the attempt cap was hit, summed.
    pub shortfall: usize,
    pub attempts: usize,
}

impl AugmentedSet {
    pub fn all_examples(&self) -> Vec<LabeledExample> {
        self.originals.iter().cloned().chain(self.added.iter().map(|a| a.example.clone())).collect()
    }

    pub fn len(&self) -> usize {
        self.originals.len() + self.added.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean `|f(x) − y|` over the added pairs.
    pub fn mean_label_error(&self) -> f64 {
        if self.added.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .added
            .iter()
            .map(|a| match eval_expr(&a.example.expr).value() {
                Some(v) => (v as f64 - a.example.value as f64).abs(),
                None => f64::NAN,
            })
            .sum();
        total / self.added.len() as f64
    }

    /// TSV with provenance columns: `expr, value, source, edit_distance`.
    pub fn added_to_tsv(&self) -> String {
        let mut out = String::new();
        for a in &self.added {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", a.example.expr, a.example.value, a.source, a.edit_distance));
        }
        out
    }
}

/// Valid perturbations per source: `(source, string, m)`.
fn collect_valid(
    train: &[LabeledExample],
    alphabet: &[char],
    vocab_size: usize,
    cfg: &AugmentConfig,
    seed: u64,
    is_valid: &(dyn Fn(&str) -> bool + Sync),
) -> Result<(Vec<(usize, String, usize)>, usize, usize), AugmentError> {
    cfg.validate()?;
    if alphabet.is_empty() {
        return Err(AugmentError::EmptyAlphabet);
    }
    let per: Vec<(Vec<(usize, String, usize)>, usize, usize)> = train
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let len = ex.expr.chars().count();
            let mut seen: HashSet<String> = HashSet::new();
            let mut found = Vec::new();
            let mut attempts = 0;
            while found.len() < cfg.per_instance_target && attempts < cfg.max_attempts {
                attempts += 1;
                let m = sample_edit_distance(cfg, len, vocab_size, &mut rng);
                let x = perturb(&ex.expr, m, &mut rng, alphabet).expect("alphabet checked");
                if x != ex.expr && is_valid(&x) && seen.insert(x.clone()) {
                    found.push((i, x, m));
                }
            }
            let short = cfg.per_instance_target - found.len();
            (found, short, attempts)
        })
        .collect();
    let mut out = Vec::new();
    let (mut shortfall, mut attempts) = (0, 0);
    for (f, s, a) in per {
        out.extend(f);
        shortfall += s;
        attempts += a;
    }
    Ok((out, shortfall, attempts))
}

/// Drops added strings that duplicate an original or an earlier addition.
fn dedup(train: &[LabeledExample], added: Vec<AugmentedExample>) -> Vec<AugmentedExample> {
    let mut seen: HashSet<String> = train.iter().map(|e| e.expr.clone()).collect();
    added.into_iter().filter(|a| seen.insert(a.example.expr.clone())).collect()
}

fn augment(
    train: &[LabeledExample],
    vocab: &Vocab,
    cfg: &AugmentConfig,
    seed: u64,
    is_valid: &(dyn Fn(&str) -> bool + Sync),
    label: impl Fn(usize, &str) -> Option<i64>,
) -> Result<AugmentedSet, AugmentError> {
    let (found, shortfall, attempts) = collect_valid(train, vocab.chars(), vocab.chars().len(), cfg, seed, is_valid)?;
    let added: Vec<AugmentedExample> = found
        .into_iter()
        .filter_map(|(src, x, m)| {
            let y = label(src, &x)?;
            let example = LabeledExample::scalar(x, y, vocab).ok()?;
            Some(AugmentedExample {
                example,
                source: src,
                edit_distance: m,
            })
        })
        .collect();
    Ok(AugmentedSet {
        originals: train.to_vec(),
        added: dedup(train, added),
        shortfall,
        attempts,
    })
}

/// Classic augmentation: each valid perturbation is paired with its own
/// re-evaluated value.
pub fn augment_classic(train: &[LabeledExample], vocab: &Vocab, cfg: &AugmentConfig, seed: u64) -> Result<AugmentedSet, AugmentError> {
    augment_classic_with(train, vocab, cfg, seed, &|s| eval_expr(s).value().is_some())
}

/// [`augment_classic`] with a caller-supplied validity oracle.
pub fn augment_classic_with(
    train: &[LabeledExample],
    vocab: &Vocab,
    cfg: &AugmentConfig,
    seed: u64,
    is_valid: &(dyn Fn(&str) -> bool + Sync),
) -> Result<AugmentedSet, AugmentError> {
    augment(train, vocab, cfg, seed, is_valid, |_, x| eval_expr(x).value().map(|v| v as i64))
}

/// RAML-like augmentation: each valid perturbation keeps the value of the
/// example it came from.
pub fn augment_raml(train: &[LabeledExample], vocab: &Vocab, cfg: &AugmentConfig, seed: u64) -> Result<AugmentedSet, AugmentError> {
    augment(
        train,
        vocab,
        cfg,
        seed,
        &|s| eval_expr(s).value().is_some(),
        |src, _| Some(train[src].value),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub m: usize,
    pub perturbations: usize,
    pub validity: f64,
    pub uniqueness: f64,
    /// Mean squared value difference to the source over valid perturbations.
    pub mse: f64,
}

/// For each `m`, perturbs `samples_per_m` randomly chosen training strings
/// with exactly `m` edits.
pub fn edit_sensitivity_study(
    train: &[LabeledExample],
    alphabet: &[char],
    m_range: std::ops::RangeInclusive<usize>,
    samples_per_m: usize,
    seed: u64,
) -> Result<Vec<SensitivityRow>, AugmentError> {
    if alphabet.is_empty() {
        return Err(AugmentError::EmptyAlphabet);
    }
    m_range
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(m as u64);
            let mut valid = 0usize;
            let mut sq = 0.0;
            let mut distinct: HashSet<String> = HashSet::new();
            for _ in 0..samples_per_m {
                let ex = &train[rng.random_range(0..train.len())];
                let x = perturb(&ex.expr, m, &mut rng, alphabet)?;
                if let Some(v) = eval_expr(&x).value() {
                    valid += 1;
                    sq += (v as f64 - ex.value as f64).powi(2);
                    distinct.insert(x);
                }
            }
            let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
            Ok(SensitivityRow {
                m,
                perturbations: samples_per_m,
                validity: ratio(valid as f64, samples_per_m),
                uniqueness: ratio(distinct.len() as f64, valid),
                mse: ratio(sq, valid),
            })
        })
        .collect()
}

pub fn sensitivity_csv(rows: &[SensitivityRow]) -> String {
    let mut out = String::from("m,perturbations,validity,uniqueness,mse\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.m, r.perturbations, r.validity, r.uniqueness, r.mse));
    }
    out
}
