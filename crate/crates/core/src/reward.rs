//! Rewards, the normalized reward distribution restricted to the training
//! set (the match index), and samplers that draw matching training examples
//! for a conditioning target.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("all rewards are zero; the target has no support in the training set")]
    NoSupport,
    #[error("match index is empty")]
    EmptyIndex,
    #[error("index kind does not support this operation")]
    WrongKind,
    #[error("target {0} out of range")]
    TargetOutOfRange(usize),
    #[error("invalid reward spec: {0}")]
    InvalidSpec(&'static str),
    #[error("bad index file: {0}")]
    BadFile(String),
    #[error("index was built for dataset {found}, expected {expected}")]
    StaleIndex { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// `exp(-lambda/2 * (f(x) - y)^2)` on scalar values.
    GaussianScalar,
    /// `exp(-lambda * l1(f(x), y))` when the distance is at most epsilon, else 0.
    L1Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub kind: RewardKind,
    pub lambda: f64,
    pub epsilon: f64,
}

impl RewardSpec {
    pub fn gaussian() -> Self {
        RewardSpec {
            kind: RewardKind::GaussianScalar,
            lambda: 1.0,
            epsilon: 0.0,
        }
    }

    pub fn l1(lambda: f64, epsilon: f64) -> Result<Self, RewardError> {
        let s = RewardSpec {
            kind: RewardKind::L1Threshold,
            lambda,
            epsilon,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.lambda > 0.0) {
            return Err(RewardError::InvalidSpec("lambda must be positive"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(RewardError::InvalidSpec("epsilon must be non-negative"));
        }
        Ok(())
    }

    /// Reward of property vector `fx` for target `y`.
    pub fn reward(&self, fx: &[f64], y: &[f64]) -> Result<f64, RewardError> {
        match self.kind {
            RewardKind::L1Threshold => reward_l1(fx, y, self),
            RewardKind::GaussianScalar => {
                if fx.len() != y.len() {
                    return Err(RewardError::DimensionMismatch(fx.len(), y.len()));
                }
                let d2: f64 = fx.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                Ok((-0.5 * self.lambda * d2).exp())
            }
        }
    }
}

/// `exp(-(fx - y)^2 / 2)`.
pub fn reward_scalar(fx: i64, y: i64) -> f64 {
    let d = (fx - y) as f64;
    (-0.5 * d * d).exp()
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn reward_l1(fx: &[f64], y: &[f64], spec: &RewardSpec) -> Result<f64, RewardError> {
    if fx.len() != y.len() {
        return Err(RewardError::DimensionMismatch(fx.len(), y.len()));
    }
    let d = l1_distance(fx, y);
    Ok(if d <= spec.epsilon {
        (-spec.lambda * d).exp()
    } else {
        0.0
    })
}

/// Divides each reward by the total. Zero entries are dropped from the
/// sparse `(position, probability)` output.
pub fn normalize_over_set(rewards: &[f64]) -> Result<Vec<(usize, f64)>, RewardError> {
    let total: f64 = rewards.iter().sum();
    if !(total > 0.0) {
        return Err(RewardError::NoSupport);
    }
    Ok(rewards
        .iter()
        .enumerate()
        .filter(|(_, &r)| r > 0.0)
        .map(|(k, &r)| (k, r / total))
        .collect())
}

/// Lowest and highest value a scalar target may take.
pub const SCALAR_MIN: i64 = -999;
pub const SCALAR_MAX: i64 = 999;

/// Training indices grouped by exact expression value.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueBuckets {
    buckets: Vec<Vec<usize>>,
    n_train: usize,
}

impl ValueBuckets {
    pub fn new(values: &[i64]) -> Self {
        let mut buckets = vec![Vec::new(); (SCALAR_MAX - SCALAR_MIN + 1) as usize];
        for (j, &v) in values.iter().enumerate() {
            if (SCALAR_MIN..=SCALAR_MAX).contains(&v) {
                buckets[(v - SCALAR_MIN) as usize].push(j);
            }
        }
        ValueBuckets {
            buckets,
            n_train: values.len(),
        }
    }

    pub fn bucket(&self, value: i64) -> &[usize] {
        if (SCALAR_MIN..=SCALAR_MAX).contains(&value) {
            &self.buckets[(value - SCALAR_MIN) as usize]
        } else {
            &[]
        }
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.iter().all(Vec::is_empty)
    }

    /// Closest value with a non-empty bucket; ties go to the lower value.
    pub fn nearest_nonempty(&self, value: i64) -> Option<i64> {
        let v = value.clamp(SCALAR_MIN, SCALAR_MAX);
        (0..=(SCALAR_MAX - SCALAR_MIN)).find_map(|d| {
            [v - d, v + d]
                .into_iter()
                .find(|&c| (SCALAR_MIN..=SCALAR_MAX).contains(&c) && !self.bucket(c).is_empty())
        })
    }
}

/// Per-target sparse rows of `p(j | i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub n_train: usize,
}

impl SparseRows {
    pub fn empty_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.is_empty()).count()
    }

    pub fn nonzero_stats(&self) -> (usize, usize, f64) {
        let counts: Vec<usize> = self.rows.iter().map(Vec::len).filter(|&c| c > 0).collect();
        let min = counts.iter().copied().min().unwrap_or(0);
        let max = counts.iter().copied().max().unwrap_or(0);
        let mean = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
        (min, max, mean)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MatchIndex {
    Scalar(ValueBuckets),
    Vector(SparseRows),
}

/// Default cap on stored entries per vector row (largest rewards kept).
pub const DEFAULT_ROW_CAP: usize = 512;

/// Scalar index: bucket training indices by value.
pub fn build_scalar_index(train_values: &[i64]) -> MatchIndex {
    MatchIndex::Scalar(ValueBuckets::new(train_values))
}

/// Vector index: for each target `i`, `p(j|i) ∝ R(x_j; y_i)` over all
/// training properties `props`, keeping positive entries only (at most
/// `row_cap`, largest first). Rows without support are left empty.
pub fn build_vector_index(
    targets: &[Vec<f64>],
    props: &[Vec<f64>],
    spec: &RewardSpec,
    row_cap: usize,
) -> Result<MatchIndex, RewardError> {
    spec.validate()?;
    if let Some(bad) = targets.iter().chain(props).find(|v| v.len() != props[0].len()) {
        return Err(RewardError::DimensionMismatch(bad.len(), props[0].len()));
    }
    let rows: Vec<Vec<(usize, f64)>> = targets
        .par_iter()
        .map(|y| {
            let mut nz: Vec<(usize, f64)> = props
                .iter()
                .enumerate()
                .filter_map(|(j, fx)| {
                    let r = spec.reward(fx, y).unwrap_or(0.0);
                    (r > 0.0).then_some((j, r))
                })
                .collect();
            if nz.len() > row_cap {
                nz.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                nz.truncate(row_cap);
                nz.sort_by_key(|e| e.0);
            }
            let rewards: Vec<f64> = nz.iter().map(|e| e.1).collect();
            match normalize_over_set(&rewards) {
                Ok(p) => p.into_iter().map(|(k, q)| (nz[k].0, q)).collect(),
                Err(_) => Vec::new(),
            }
        })
        .collect();
    let index = SparseRows {
        rows,
        n_train: props.len(),
    };
    let empty = index.empty_rows();
    if empty > 0 {
        log::warn!("{empty} of {} targets have no training support", targets.len());
    }
    Ok(MatchIndex::Vector(index))
}

/// Draws matching training indices for scalar targets: a truncated normal
/// around the target, rounded, then a uniform member of that value bucket.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMatchSampler {
    pub sigma: f64,
    pub retries: usize,
}

impl Default for ScalarMatchSampler {
    fn default() -> Self {
        ScalarMatchSampler {
            sigma: 1.0,
            retries: 32,
        }
    }
}

impl ScalarMatchSampler {
    /// `y' ~ N(y, sigma^2)` restricted to the open interval `(-999, 999)`.
    pub fn truncated_normal<R: Rng + ?Sized>(&self, y: f64, rng: &mut R) -> f64 {
        let (lo, hi) = (SCALAR_MIN as f64, SCALAR_MAX as f64);
        if self.sigma == 0.0 {
            return y.clamp(lo, hi);
        }
        loop {
            let z: f64 = rng.sample(StandardNormal);
            let v = y + self.sigma * z;
            if v > lo && v < hi {
                return v;
            }
        }
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, y: i64, buckets: &ValueBuckets, rng: &mut R) -> Result<usize, RewardError> {
        if buckets.is_empty() {
            return Err(RewardError::EmptyIndex);
        }
        let mut value = y;
        for _ in 0..self.retries {
            value = self.truncated_normal(y as f64, rng).round() as i64;
            let b = buckets.bucket(value);
            if !b.is_empty() {
                return Ok(b[rng.random_range(0..b.len())]);
            }
        }
        let v = buckets.nearest_nonempty(value).ok_or(RewardError::EmptyIndex)?;
        let b = buckets.bucket(v);
        Ok(b[rng.random_range(0..b.len())])
    }
}

pub fn sample_matches_scalar<R: Rng + ?Sized>(
    y: i64,
    index: &MatchIndex,
    k: usize,
    sampler: &ScalarMatchSampler,
    rng: &mut R,
) -> Result<Vec<usize>, RewardError> {
    let MatchIndex::Scalar(b) = index else {
        return Err(RewardError::WrongKind);
    };
    (0..k).map(|_| sampler.sample_one(y, b, rng)).collect()
}

/// Draws one `j ~ p(j | target)` from a vector index row.
pub fn sample_row<R: Rng + ?Sized>(rows: &SparseRows, target: usize, rng: &mut R) -> Result<Option<usize>, RewardError> {
    let row = rows.rows.get(target).ok_or(RewardError::TargetOutOfRange(target))?;
    if row.is_empty() {
        return Ok(None);
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(j, p) in row {
        acc += p;
        if u < acc {
            return Ok(Some(j));
        }
    }
    Ok(Some(row[row.len() - 1].0))
}

/// A training pair `(x_source, y_target)`: expression of training example
/// `source` conditioned on the target of training example `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MatchedPair {
    pub source: usize,
    pub target: usize,
}

/// For every target, `k` matched pairs in target order. Targets whose
/// vector row is empty produce no pairs.
pub fn presample_training_pairs<R: Rng + ?Sized>(
    target_values: &[i64],
    index: &MatchIndex,
    k: usize,
    sampler: &ScalarMatchSampler,
    rng: &mut R,
) -> Result<Vec<MatchedPair>, RewardError> {
    let mut out = Vec::with_capacity(target_values.len() * k);
    match index {
        MatchIndex::Scalar(b) => {
            for (i, &y) in target_values.iter().enumerate() {
                for _ in 0..k {
                    out.push(MatchedPair {
                        source: sampler.sample_one(y, b, rng)?,
                        target: i,
                    });
                }
            }
        }
        MatchIndex::Vector(rows) => {
            for i in 0..target_values.len() {
                for _ in 0..k {
                    if let Some(j) = sample_row(rows, i, rng)? {
                        out.push(MatchedPair { source: j, target: i });
                    }
                }
            }
        }
    }
    Ok(out)
}

const INDEX_MAGIC: &[u8; 4] = b"RMIX";
const INDEX_VERSION: u32 = 1;

impl MatchIndex {
    /// Writes the binary index: header (magic, version, kind, N, dataset
    /// hash) then rows of `(target u64, count u32, count x (index u64, p f64))`.
    /// Scalar buckets are stored as rows keyed by the value (two's complement)
    /// with uniform probabilities.
    pub fn write_to<W: Write>(&self, w: &mut W, dataset_hash: &str) -> Result<(), RewardError> {
        let hash = hex::decode(dataset_hash).map_err(|e| RewardError::BadFile(e.to_string()))?;
        if hash.len() != 32 {
            return Err(RewardError::BadFile("dataset hash must be 32 bytes".into()));
        }
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        let (kind, n) = match self {
            MatchIndex::Scalar(b) => (0u8, b.n_train),
            MatchIndex::Vector(r) => (1u8, r.n_train),
        };
        w.write_all(&[kind])?;
        w.write_all(&(n as u64).to_le_bytes())?;
        w.write_all(&hash)?;
        let mut row = |key: u64, entries: &mut dyn Iterator<Item = (usize, f64)>, count: usize| -> io::Result<()> {
            w.write_all(&key.to_le_bytes())?;
            w.write_all(&(count as u32).to_le_bytes())?;
            for (j, p) in entries {
                w.write_all(&(j as u64).to_le_bytes())?;
                w.write_all(&p.to_le_bytes())?;
            }
            Ok(())
        };
        match self {
            MatchIndex::Scalar(b) => {
                for v in SCALAR_MIN..=SCALAR_MAX {
                    let bucket = b.bucket(v);
                    if !bucket.is_empty() {
                        let p = 1.0 / bucket.len() as f64;
                        row(v as u64, &mut bucket.iter().map(|&j| (j, p)), bucket.len())?;
                    }
                }
            }
            MatchIndex::Vector(r) => {
                for (i, entries) in r.rows.iter().enumerate() {
                    row(i as u64, &mut entries.iter().copied(), entries.len())?;
                }
            }
        }
        Ok(())
    }

    /// Reads an index, returning it with the dataset hash from its header.
    pub fn read_from<R: Read>(r: &mut R) -> Result<(MatchIndex, String), RewardError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let bad = |m: &str| RewardError::BadFile(m.to_string());
        let mut cur = Cursor { buf: &buf, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated header"))? != INDEX_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated header"))?;
        if version != INDEX_VERSION {
            return Err(bad("unsupported version"));
        }
        let kind = cur.take(1).ok_or_else(|| bad("truncated header"))?[0];
        let n = cur.u64().ok_or_else(|| bad("truncated header"))? as usize;
        let hash = hex::encode(cur.take(32).ok_or_else(|| bad("truncated header"))?);
        let mut rows = Vec::new();
        while cur.pos < buf.len() {
            let key = cur.u64().ok_or_else(|| bad("truncated row"))?;
            let count = cur.u32().ok_or_else(|| bad("truncated row"))? as usize;
            let mut entries = Vec::with_capacity(count);
            for _ in 0..count {
                let j = cur.u64().ok_or_else(|| bad("truncated row"))? as usize;
                let p = f64::from_le_bytes(cur.take(8).ok_or_else(|| bad("truncated row"))?.try_into().unwrap());
                if j >= n {
                    return Err(bad("index out of range"));
                }
                entries.push((j, p));
            }
            rows.push((key, entries));
        }
        let index = match kind {
            0 => {
                let mut values = vec![i64::MIN; n];
                for (key, entries) in rows {
                    for (j, _) in entries {
                        values[j] = key as i64;
                    }
                }
                let mut b = ValueBuckets::new(&values);
                b.n_train = n;
                MatchIndex::Scalar(b)
            }
            1 => MatchIndex::Vector(SparseRows {
                rows: rows.into_iter().map(|(_, e)| e).collect(),
                n_train: n,
            }),
            _ => return Err(bad("unknown kind")),
        };
        Ok((index, hash))
    }

    pub fn save(&self, path: &Path, dataset_hash: &str) -> Result<(), RewardError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, dataset_hash)?;
        fs::write(path, buf)?;
        Ok(())
    }

    /// Loads an index and checks it was built for `dataset_hash`.
    pub fn load(path: &Path, dataset_hash: &str) -> Result<MatchIndex, RewardError> {
        let (index, found) = MatchIndex::read_from(&mut fs::File::open(path)?)?;
        if found != dataset_hash {
            return Err(RewardError::StaleIndex {
                expected: dataset_hash.to_string(),
                found,
            });
        }
        Ok(index)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Exhaustive normalized-reward tables over tiny sequence domains.
pub mod toy {
    /// All sequences over `0..vocab` with lengths `1..=max_len`, shortest
    /// first.
    pub fn enumerate_sequences(vocab: u8, max_len: usize) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        let mut layer: Vec<Vec<u8>> = vec![Vec::new()];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &layer {
                for t in 0..vocab {
                    let mut s2 = s.clone();
                    s2.push(t);
                    next.push(s2);
                }
            }
            out.extend(next.iter().cloned());
            layer = next;
        }
        out
    }

    /// `R(x; y)`, `c(y) = sum_x R(x; y)` and `R̄(x | y) = R / c` for one
    /// target over an enumerated domain.
    #[derive(Debug, Clone)]
    pub struct NormalizedRewardTable {
        pub rewards: Vec<f64>,
        pub normalizer: f64,
        pub normalized: Vec<f64>,
    }

    impl NormalizedRewardTable {
        pub fn new(rewards: Vec<f64>) -> Self {
            let normalizer: f64 = rewards.iter().sum();
            let normalized = rewards.iter().map(|r| r / normalizer).collect();
            NormalizedRewardTable {
                rewards,
                normalizer,
                normalized,
            }
        }

        /// `E_p[R]`.
        pub fn expected_reward(&self, model: &[f64]) -> f64 {
            self.rewards.iter().zip(model).map(|(r, p)| r * p).sum()
        }

        /// `c(y) * E_{R̄}[p]`.
        pub fn flipped_expectation(&self, model: &[f64]) -> f64 {
            self.normalizer * self.normalized.iter().zip(model).map(|(r, p)| r * p).sum::<f64>()
        }
    }
}
