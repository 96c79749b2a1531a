//! Generation quality and conditional accuracy metrics.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{decode, LabeledExample, TokenSequence, Vocab};
use crate::evaluator::{eval_expr, PropertyOracle};
use crate::model::{ConditionalLstm, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("every generation was invalid")]
    AllInvalid,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Anything that turns conditioning vectors into candidate strings; `None`
/// marks an undecodable generation.
pub trait Generator {
    fn generate(&self, conds: &[&[f64]], rng: &mut ChaCha8Rng) -> Result<Vec<Option<String>>, MetricsError>;
}

/// Ancestral sampling from a model.
pub struct ModelSampler<'a> {
    pub model: &'a ConditionalLstm,
    pub vocab: &'a Vocab,
}

impl Generator for ModelSampler<'_> {
    fn generate(&self, conds: &[&[f64]], rng: &mut ChaCha8Rng) -> Result<Vec<Option<String>>, MetricsError> {
        let seqs = self.model.sample_batch(conds, self.model.config.max_len, rng)?;
        Ok(decode_all(&seqs, self.vocab))
    }
}

pub fn decode_all(seqs: &[TokenSequence], vocab: &Vocab) -> Vec<Option<String>> {
    seqs.iter().map(|s| decode(s, vocab).ok()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub total: usize,
    pub valid: usize,
    pub distinct_valid: usize,
    pub novel: usize,
    pub validity: f64,
    /// Distinct valid over valid.
    pub uniqueness: f64,
    /// Distinct valid unseen in training over distinct valid.
    pub novelty: f64,
    /// Set when no sample was valid and the two ratios above are reported as 0.
    pub degenerate: bool,
}

pub fn generation_metrics<S: AsRef<str>>(samples: &[Option<S>], train: &HashSet<String>) -> Result<GenerationMetrics, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let valid: Vec<&str> = samples
        .iter()
        .filter_map(|s| s.as_ref().map(|s| s.as_ref()))
        .filter(|s| eval_expr(s).value().is_some())
        .collect();
    let distinct: HashSet<&str> = valid.iter().copied().collect();
    let novel = distinct.iter().filter(|s| !train.contains(**s)).count();
    let degenerate = valid.is_empty();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(GenerationMetrics {
        total: samples.len(),
        valid: valid.len(),
        distinct_valid: distinct.len(),
        novel,
        validity: ratio(valid.len(), samples.len()),
        uniqueness: ratio(distinct.len(), valid.len()),
        novelty: ratio(novel, distinct.len()),
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(xs: &[f64]) -> Stat {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub checkpoint_hash: Option<String>,
    pub samples_per_target: usize,
    pub repeats: usize,
    pub targets: usize,
    pub nll_convention: String,
    pub uniqueness_denominator: String,
    pub novelty_denominator: String,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub validity: Stat,
    pub uniqueness: Stat,
    pub novelty: Stat,
    pub mae: Stat,
    pub exact_accuracy: Stat,
    pub within_3_accuracy: Stat,
    pub test_nll_per_token: Option<f64>,
    pub per_property_mse: Vec<f64>,
    pub per_property_correlation: Vec<f64>,
    pub metadata: ReportMetadata,
}

/// Rows of targets generated per call to the generator.
const TARGET_CHUNK: usize = 200;

/// Samples `s` strings per target, `repeats` times. Invalid samples are
/// dropped from the error metrics and show up only in validity.
pub fn conditional_eval_scalar<G: Generator>(
    gen: &G,
    targets: &[LabeledExample],
    train: &HashSet<String>,
    s: usize,
    repeats: usize,
    seed: u64,
) -> Result<EvalReport, MetricsError> {
    if targets.is_empty() || s == 0 || repeats == 0 {
        return Err(MetricsError::Empty);
    }
    let mut cols: [Vec<f64>; 6] = Default::default();
    let mut flags = Vec::new();
    for r in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let mut all = Vec::with_capacity(targets.len() * s);
        let (mut abs_sum, mut exact, mut near, mut valid) = (0.0, 0usize, 0usize, 0usize);
        for chunk in targets.chunks(TARGET_CHUNK) {
            let conds: Vec<&[f64]> = chunk.iter().flat_map(|e| std::iter::repeat_n(&e.cond[..], s)).collect();
            let out = gen.generate(&conds, &mut rng)?;
            for (k, x) in out.into_iter().enumerate() {
                let y = chunk[k / s].value as i128;
                if let Some(v) = x.as_deref().and_then(|x| eval_expr(x).value()) {
                    let d = (v - y).abs();
                    abs_sum += d as f64;
                    exact += (d == 0) as usize;
                    near += (d <= 3) as usize;
                    valid += 1;
                }
                all.push(x);
            }
        }
        let g = generation_metrics(&all, train)?;
        if g.degenerate {
            flags.push(format!("repeat {r}: no valid samples"));
        }
        let denom = valid.max(1) as f64;
        for (c, v) in cols.iter_mut().zip([
            g.validity,
            g.uniqueness,
            g.novelty,
            if valid == 0 { f64::NAN } else { abs_sum / denom },
            exact as f64 / denom,
            near as f64 / denom,
        ]) {
            c.push(v);
        }
    }
    Ok(EvalReport {
        validity: Stat::of(&cols[0]),
        uniqueness: Stat::of(&cols[1]),
        novelty: Stat::of(&cols[2]),
        mae: Stat::of(&cols[3]),
        exact_accuracy: Stat::of(&cols[4]),
        within_3_accuracy: Stat::of(&cols[5]),
        test_nll_per_token: None,
        per_property_mse: Vec::new(),
        per_property_correlation: Vec::new(),
        metadata: ReportMetadata {
            seed,
            checkpoint_hash: None,
            samples_per_target: s,
            repeats,
            targets: targets.len(),
            nll_convention: "mean per predicted token, STOP included".into(),
            uniqueness_denominator: "valid samples".into(),
            novelty_denominator: "distinct valid samples".into(),
            flags,
        },
    })
}

/// Mean negative log-likelihood per predicted token over ground-truth pairs.
pub fn test_nll_per_token(model: &ConditionalLstm, examples: &[LabeledExample]) -> Result<f64, MetricsError> {
    if examples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (mut nll, mut tokens) = (0.0, 0usize);
    for chunk in examples.chunks(256) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|e| e.tokens.tokens()).collect();
        let conds: Vec<&[f64]> = chunk.iter().map(|e| &e.cond[..]).collect();
        nll -= model.log_probs(&seqs, &conds)?.iter().sum::<f64>();
        tokens += seqs.iter().map(|s| s.len() - 1).sum::<usize>();
    }
    Ok(nll / tokens as f64)
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    // exact constancy check; the mean of equal values can be off by an ulp
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(xs) || constant(ys) {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorEval {
    pub mse: Vec<f64>,
    pub correlation: Vec<f64>,
    pub scored_targets: usize,
    pub invalid_generations: usize,
    pub flags: Vec<String>,
}

/// For each target property vector, averages `f(x)` over the valid ones of
/// `s` generations, then reports per-dimension MSE and Pearson correlation
/// across targets.
pub fn conditional_eval_vector<G: Generator>(
    gen: &G,
    oracle: &dyn PropertyOracle,
    targets: &[Vec<f64>],
    s: usize,
    seed: u64,
) -> Result<VectorEval, MetricsError> {
    if targets.is_empty() || s == 0 {
        return Err(MetricsError::Empty);
    }
    let dim = oracle.arity();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pred: Vec<Vec<f64>> = Vec::new();
    let mut truth: Vec<&[f64]> = Vec::new();
    let mut invalid = 0;
    for chunk in targets.chunks(TARGET_CHUNK) {
        let conds: Vec<&[f64]> = chunk.iter().flat_map(|t| std::iter::repeat_n(&t[..], s)).collect();
        let out = gen.generate(&conds, &mut rng)?;
        for (ti, t) in chunk.iter().enumerate() {
            let mut sum = vec![0.0; dim];
            let mut n = 0;
            for x in &out[ti * s..(ti + 1) * s] {
                match x.as_deref().and_then(|x| oracle.evaluate(x)) {
                    Some(v) => {
                        sum.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
                        n += 1;
                    }
                    None => invalid += 1,
                }
            }
            if n > 0 {
                pred.push(sum.into_iter().map(|v| v / n as f64).collect());
                truth.push(t);
            }
        }
    }
    if pred.is_empty() {
        return Err(MetricsError::AllInvalid);
    }
    let mut flags = Vec::new();
    let mut mse = Vec::with_capacity(dim);
    let mut correlation = Vec::with_capacity(dim);
    for k in 0..dim {
        let p: Vec<f64> = pred.iter().map(|v| v[k]).collect();
        let t: Vec<f64> = truth.iter().map(|v| v[k]).collect();
        mse.push(p.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64);
        correlation.push(pearson(&p, &t).unwrap_or_else(|| {
            flags.push(format!("dimension {k}: correlation undefined, reported as 0"));
            0.0
        }));
    }
    Ok(VectorEval {
        mse,
        correlation,
        scored_targets: pred.len(),
        invalid_generations: invalid,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::MultiPropertyOracle;

    struct Fixed(Vec<Option<String>>);

    impl Generator for Fixed {
        fn generate(&self, conds: &[&[f64]], _: &mut ChaCha8Rng) -> Result<Vec<Option<String>>, MetricsError> {
            Ok((0..conds.len()).map(|i| self.0[i % self.0.len()].clone()).collect())
        }
    }

    /// Emits `"<y>+0"` style strings equal in value to the scalar target.
    struct Perfect;

    impl Generator for Perfect {
        fn generate(&self, conds: &[&[f64]], _: &mut ChaCha8Rng) -> Result<Vec<Option<String>>, MetricsError> {
            Ok(conds
                .iter()
                .map(|c| {
                    let y = (c[0] * crate::dataset::Y_SCALE).round() as i64;
                    Some(if y >= 0 { format!("{y}") } else { format!("0-{}", -y) })
                })
                .collect())
        }
    }

    fn hand_counted() -> (Vec<Option<&'static str>>, HashSet<String>) {
        (
            vec![Some("1+1"), Some("1+1"), Some("1+"), Some("2*3")],
            ["2*3".to_string()].into_iter().collect(),
        )
    }

    #[test]
    fn generation_counts() {
        let (s, train) = hand_counted();
        let g = generation_metrics(&s, &train).unwrap();
        assert_eq!(g.validity, 0.75);
        assert!((g.uniqueness - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(g.novelty, 0.5);
        assert_eq!((g.uniqueness * g.validity * g.total as f64).round() as usize, g.distinct_valid);

        let bad = generation_metrics(&[Some("1+"), None], &train).unwrap();
        assert!(bad.degenerate);
        assert_eq!((bad.validity, bad.uniqueness, bad.novelty), (0.0, 0.0, 0.0));
        assert!(generation_metrics::<&str>(&[], &train).is_err());

        let same = generation_metrics(&[Some("2*3")], &train).unwrap();
        assert_eq!(same.novelty, 0.0);
    }

    fn targets() -> Vec<LabeledExample> {
        let v = Vocab::expression();
        ["1+1", "9*9", "0-50", "3"]
            .iter()
            .map(|s| LabeledExample::scalar(s.to_string(), eval_expr(s).value().unwrap() as i64, &v).unwrap())
            .collect()
    }

    #[test]
    fn perfect_generator_scores_perfectly() {
        let r = conditional_eval_scalar(&Perfect, &targets(), &HashSet::new(), 25, 6, 0).unwrap();
        assert_eq!(r.mae.mean, 0.0);
        assert_eq!(r.exact_accuracy.mean, 1.0);
        assert_eq!(r.within_3_accuracy.mean, 1.0);
        assert_eq!(r.validity.mean, 1.0);
        assert_eq!(r.metadata.repeats, 6);
        assert_eq!(r.mae.std, 0.0);
    }

    #[test]
    fn invalid_samples_only_move_validity() {
        let g = Fixed(vec![Some("2".into()), None]);
        let t = &targets()[..1];
        let r = conditional_eval_scalar(&g, t, &HashSet::new(), 4, 1, 0).unwrap();
        assert_eq!(r.validity.mean, 0.5);
        assert_eq!(r.mae.mean, 0.0);
    }

    #[test]
    fn pearson_matches_two_pass_covariance() {
        let xs = [1.0, 2.5, -0.3, 4.0, 2.2];
        let ys = [0.7, 1.9, 0.1, 3.3, 1.0];
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (n - 1.0);
        let sx = (xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let sy = (ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((pearson(&xs, &ys).unwrap() - cov / (sx * sy)).abs() < 1e-14);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 2.0]), None);
    }

    /// Looks up the stored expression whose property vector equals the target.
    struct Echo(Vec<(Vec<f64>, String)>);

    impl Generator for Echo {
        fn generate(&self, conds: &[&[f64]], _: &mut ChaCha8Rng) -> Result<Vec<Option<String>>, MetricsError> {
            Ok(conds
                .iter()
                .map(|c| self.0.iter().find(|(v, _)| v[..] == c[..]).map(|(_, s)| s.clone()))
                .collect())
        }
    }

    #[test]
    fn vector_eval_contracts() {
        let exprs = ["1+1", "9*9-3", "(4-8)//3", "7", "12*3+1"];
        let o = MultiPropertyOracle::fit(exprs);
        let stored: Vec<(Vec<f64>, String)> = exprs.iter().map(|s| (o.evaluate(s).unwrap(), s.to_string())).collect();
        let t: Vec<Vec<f64>> = stored.iter().map(|x| x.0.clone()).collect();
        let r = conditional_eval_vector(&Echo(stored), &o, &t, 3, 0).unwrap();
        assert!(r.mse.iter().all(|&m| m < 1e-28));
        for c in &r.correlation {
            assert!((c - 1.0).abs() < 1e-12);
        }
        let constant = conditional_eval_vector(&Fixed(vec![Some("5".into())]), &o, &t, 2, 0).unwrap();
        assert_eq!(constant.correlation, vec![0.0; 3]);
        assert_eq!(constant.flags.len(), 3);
        assert!(matches!(
            conditional_eval_vector(&Fixed(vec![None]), &o, &t, 2, 0),
            Err(MetricsError::AllInvalid)
        ));
    }
}
