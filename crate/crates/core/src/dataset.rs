//! Dataset generation (sample, evaluate, filter, dedup, split), character
//! vocabularies and the on-disk TSV layout.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evaluator::{eval_expr, EvalOutcome};
use crate::grammar::{Derivation, DerivationBudget, Pcfg};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const STOP: usize = 2;

/// Conditioning values are the expression value divided by this.
pub const Y_SCALE: f64 = 1000.0;

const SPECIAL_NAMES: [&str; 3] = ["<pad>", "<s>", "</s>"];
const CHUNK: usize = 8192;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("character {0:?} is not in the vocabulary")]
    UnknownChar(char),
    #[error("malformed token sequence: {0}")]
    Malformed(&'static str),
    #[error("only {unique} unique examples after filtering, need more than {needed}")]
    InsufficientExamples { unique: usize, needed: usize },
    #[error("{file}:{line}: {message}")]
    Format {
        file: String,
        line: usize,
        message: String,
    },
    #[error("dataset hash mismatch: manifest says {expected}, files hash to {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Character-level token table; indices 0..3 are PAD, START and STOP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    lookup: [Option<u8>; 128],
}

impl Vocab {
    /// Special tokens followed by `chars` in sorted order.
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = chars.into_iter().collect();
        let chars: Vec<char> = set.into_iter().collect();
        let mut lookup = [None; 128];
        for (i, &c) in chars.iter().enumerate() {
            if (c as usize) < 128 {
                lookup[c as usize] = Some((i + SPECIAL_NAMES.len()) as u8);
            }
        }
        Vocab { chars, lookup }
    }

    /// The full expression alphabet: digits, `+ - * / ( )`.
    pub fn expression() -> Self {
        Vocab::from_chars("0123456789+-*/()".chars())
    }

    pub fn len(&self) -> usize {
        self.chars.len() + SPECIAL_NAMES.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        if (c as usize) < 128 {
            self.lookup[c as usize].map(usize::from)
        } else {
            None
        }
    }

    pub fn char_of(&self, token: usize) -> Option<char> {
        token
            .checked_sub(SPECIAL_NAMES.len())
            .and_then(|i| self.chars.get(i).copied())
    }

    pub fn token_name(&self, token: usize) -> String {
        match token {
            t if t < SPECIAL_NAMES.len() => SPECIAL_NAMES[t].to_string(),
            t => self.char_of(t).map(String::from).unwrap_or_else(|| "?".into()),
        }
    }

    /// One token per line, index = line number.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in 0..self.len() {
            s.push_str(&self.token_name(t));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, DatasetError> {
        let lines: Vec<&str> = text.lines().collect();
        let bad = |line: usize, message: &str| DatasetError::Format {
            file: "vocab.txt".into(),
            line,
            message: message.into(),
        };
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            if lines.get(i) != Some(name) {
                return Err(bad(i + 1, "expected special token"));
            }
        }
        let mut chars = Vec::new();
        for (i, l) in lines.iter().enumerate().skip(SPECIAL_NAMES.len()) {
            let mut it = l.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => return Err(bad(i + 1, "expected a single character")),
            }
        }
        let v = Vocab::from_chars(chars.iter().copied());
        if v.chars != chars {
            return Err(bad(SPECIAL_NAMES.len() + 1, "characters must be sorted and unique"));
        }
        Ok(v)
    }
}

/// START, payload tokens, STOP.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Ends with STOP (sampling may return truncated sequences).
    pub fn is_complete(&self) -> bool {
        self.0.len() >= 2 && self.0[0] == START && self.0.last() == Some(&STOP)
    }
}

pub fn encode(s: &str, vocab: &Vocab) -> Result<TokenSequence, DatasetError> {
    let mut out = Vec::with_capacity(s.len() + 2);
    out.push(START);
    for c in s.chars() {
        out.push(vocab.index_of(c).ok_or(DatasetError::UnknownChar(c))?);
    }
    out.push(STOP);
    Ok(TokenSequence(out))
}

pub fn decode(tokens: &TokenSequence, vocab: &Vocab) -> Result<String, DatasetError> {
    let t = tokens.tokens();
    if t.first() != Some(&START) {
        return Err(DatasetError::Malformed("missing START"));
    }
    if t.len() < 2 || t.last() != Some(&STOP) {
        return Err(DatasetError::Malformed("missing STOP"));
    }
    t[1..t.len() - 1]
        .iter()
        .map(|&k| vocab.char_of(k).ok_or(DatasetError::Malformed("special token inside sequence")))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub expr: String,
    pub tokens: TokenSequence,
    /// Oracle value of `expr`.
    pub value: i64,
    /// Conditioning input fed to the model.
    pub cond: Vec<f64>,
}

impl LabeledExample {
    pub fn scalar(expr: String, value: i64, vocab: &Vocab) -> Result<Self, DatasetError> {
        let tokens = encode(&expr, vocab)?;
        Ok(LabeledExample {
            expr,
            tokens,
            value,
            cond: vec![value as f64 / Y_SCALE],
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_samples: usize,
    pub draws: u64,
    pub budget_exceeded: u64,
    pub filtered_out: u64,
    pub unique: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub grammar_hash: String,
    pub dataset_hash: String,
}

impl DatasetManifest {
    pub fn unique_fraction(&self) -> f64 {
        self.unique as f64 / self.n_samples as f64
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Vec<LabeledExample>,
    pub valid: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub vocab: Vocab,
    pub manifest: DatasetManifest,
}

#[derive(Debug, Clone)]
pub struct BuildConfig {
    /// Number of samples that pass the range and length filters.
    pub n_samples: usize,
    pub valid: usize,
    pub test: usize,
    /// Keep at most this many training examples (the rest are dropped).
    pub train_cap: Option<usize>,
    pub seed: u64,
    pub budget: DerivationBudget,
}

impl BuildConfig {
    pub fn new(n_samples: usize, valid: usize, test: usize, seed: u64) -> Self {
        BuildConfig {
            n_samples,
            valid,
            test,
            train_cap: None,
            seed,
            budget: DerivationBudget::default(),
        }
    }
}

#[derive(Default)]
struct ChunkOut {
    kept: Vec<(String, i64)>,
    draws: u64,
    budget_exceeded: u64,
    filtered_out: u64,
}

fn generate_chunk(pcfg: &Pcfg, budget: DerivationBudget, seed: u64, chunk: usize, want: usize) -> ChunkOut {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    let mut out = ChunkOut::default();
    while out.kept.len() < want {
        out.draws += 1;
        let s = match pcfg.sample_derivation(budget, &mut rng) {
            Derivation::Complete(s) => s,
            Derivation::BudgetExceeded => {
                out.budget_exceeded += 1;
                continue;
            }
        };
        match eval_expr(&s) {
            EvalOutcome::Value(v) => out.kept.push((s, v as i64)),
            EvalOutcome::Invalid(_) => out.filtered_out += 1,
        }
    }
    out
}

/// Draws derivations until `n_samples` of them evaluate to an in-range
/// value within the length limit, dedups by expression string and splits by
/// a seeded shuffle. Generation runs in fixed-size chunks with one rng
/// stream each, so the result does not depend on the thread count.
pub fn build_dataset(pcfg: &Pcfg, cfg: &BuildConfig) -> Result<DatasetSplits, DatasetError> {
    let n_chunks = cfg.n_samples.div_ceil(CHUNK);
    let chunks: Vec<ChunkOut> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let want = CHUNK.min(cfg.n_samples - c * CHUNK);
            generate_chunk(pcfg, cfg.budget, cfg.seed, c, want)
        })
        .collect();

    let mut manifest = DatasetManifest {
        seed: cfg.seed,
        n_samples: cfg.n_samples,
        grammar_hash: pcfg.source_hash().to_string(),
        ..Default::default()
    };
    let mut seen = HashSet::new();
    let mut unique: Vec<(String, i64)> = Vec::new();
    for ch in chunks {
        manifest.draws += ch.draws;
        manifest.budget_exceeded += ch.budget_exceeded;
        manifest.filtered_out += ch.filtered_out;
        for (s, v) in ch.kept {
            if seen.insert(s.clone()) {
                unique.push((s, v));
            }
        }
    }
    manifest.unique = unique.len();
    let needed = cfg.valid + cfg.test;
    if unique.len() <= needed {
        return Err(DatasetError::InsufficientExamples {
            unique: unique.len(),
            needed,
        });
    }

    // chunk streams count up from zero; the split shuffle uses the last one
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    unique.shuffle(&mut rng);

    let vocab = Vocab::from_chars(unique.iter().flat_map(|(s, _)| s.chars()));
    let to_examples = |items: &[(String, i64)]| -> Result<Vec<LabeledExample>, DatasetError> {
        items
            .iter()
            .map(|(s, v)| LabeledExample::scalar(s.clone(), *v, &vocab))
            .collect()
    };
    let valid = to_examples(&unique[..cfg.valid])?;
    let test = to_examples(&unique[cfg.valid..needed])?;
    let mut train_items = &unique[needed..];
    if let Some(cap) = cfg.train_cap {
        train_items = &train_items[..cap.min(train_items.len())];
    }
    let train = to_examples(train_items)?;
    manifest.train = train.len();
    manifest.valid = valid.len();
    manifest.test = test.len();

    let mut splits = DatasetSplits {
        train,
        valid,
        test,
        vocab,
        manifest,
    };
    splits.manifest.dataset_hash = splits.content_hash();
    Ok(splits)
}

/// `<expression>\t<value>` per line.
pub fn examples_to_tsv(examples: &[LabeledExample]) -> String {
    let mut s = String::with_capacity(examples.len() * 16);
    for e in examples {
        s.push_str(&e.expr);
        s.push('\t');
        s.push_str(&e.value.to_string());
        s.push('\n');
    }
    s
}

pub fn examples_from_tsv(file: &str, text: &str, vocab: &Vocab) -> Result<Vec<LabeledExample>, DatasetError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |message: String| DatasetError::Format {
                file: file.to_string(),
                line: i + 1,
                message,
            };
            let mut cols = line.split('\t');
            let expr = cols.next().unwrap_or_default();
            let value: i64 = cols
                .next()
                .ok_or_else(|| bad("missing value column".into()))?
                .parse()
                .map_err(|e| bad(format!("bad value: {e}")))?;
            match eval_expr(expr) {
                EvalOutcome::Value(v) if v as i64 == value => {}
                other => return Err(bad(format!("`{expr}` evaluates to {other:?}, file says {value}"))),
            }
            LabeledExample::scalar(expr.to_string(), value, vocab)
        })
        .collect()
}

pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

impl DatasetSplits {
    /// Hash over the serialized splits and vocabulary.
    pub fn content_hash(&self) -> String {
        hash_files(
            &examples_to_tsv(&self.train),
            &examples_to_tsv(&self.valid),
            &examples_to_tsv(&self.test),
            &self.vocab.to_text(),
        )
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("train.tsv"), examples_to_tsv(&self.train))?;
        fs::write(dir.join("valid.tsv"), examples_to_tsv(&self.valid))?;
        fs::write(dir.join("test.tsv"), examples_to_tsv(&self.test))?;
        fs::write(dir.join("vocab.txt"), self.vocab.to_text())?;
        fs::write(
            dir.join("dataset.json"),
            serde_json::to_string_pretty(&self.manifest)? + "\n",
        )?;
        Ok(())
    }

    /// Loads a dataset directory and checks its content hash.
    pub fn read_dir(dir: &Path) -> Result<Self, DatasetError> {
        let train_t = fs::read_to_string(dir.join("train.tsv"))?;
        let valid_t = fs::read_to_string(dir.join("valid.tsv"))?;
        let test_t = fs::read_to_string(dir.join("test.tsv"))?;
        let vocab_t = fs::read_to_string(dir.join("vocab.txt"))?;
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
        let actual = hash_files(&train_t, &valid_t, &test_t, &vocab_t);
        if actual != manifest.dataset_hash {
            return Err(DatasetError::HashMismatch {
                expected: manifest.dataset_hash,
                actual,
            });
        }
        let vocab = Vocab::from_text(&vocab_t)?;
        Ok(DatasetSplits {
            train: examples_from_tsv("train.tsv", &train_t, &vocab)?,
            valid: examples_from_tsv("valid.tsv", &valid_t, &vocab)?,
            test: examples_from_tsv("test.tsv", &test_t, &vocab)?,
            vocab,
            manifest,
        })
    }

    pub fn longest_sequence(&self) -> usize {
        self.train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .map(|e| e.tokens.len())
            .max()
            .unwrap_or(2)
    }
}

fn hash_files(train: &str, valid: &str, test: &str, vocab: &str) -> String {
    sha256_hex(&[train.as_bytes(), valid.as_bytes(), test.as_bytes(), vocab.as_bytes()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{expr_grammar, parse_pcfg};

    #[test]
    fn encode_wraps_with_delimiters() {
        let v = Vocab::expression();
        assert_eq!(v.len(), 19);
        let t = encode("1+1", &v).unwrap();
        let one = v.index_of('1').unwrap();
        let plus = v.index_of('+').unwrap();
        assert_eq!(t.0, vec![START, one, plus, one, STOP]);
        assert_eq!(decode(&t, &v).unwrap(), "1+1");
        assert!(matches!(encode("1^2", &v), Err(DatasetError::UnknownChar('^'))));
    }

    #[test]
    fn decode_rejects_malformed() {
        let v = Vocab::expression();
        let one = v.index_of('1').unwrap();
        assert!(decode(&TokenSequence(vec![START, one]), &v).is_err());
        assert!(decode(&TokenSequence(vec![one, STOP]), &v).is_err());
        assert!(decode(&TokenSequence(vec![START, PAD, STOP]), &v).is_err());
        assert!(decode(&TokenSequence(vec![START, 99, STOP]), &v).is_err());
        assert_eq!(decode(&TokenSequence(vec![START, STOP]), &v).unwrap(), "");
    }

    #[test]
    fn vocab_text_roundtrip() {
        let v = Vocab::expression();
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocab::from_text("<pad>\n<s>\n</s>\n2\n1\n").is_err());
    }

    #[test]
    fn degenerate_grammar_dedups() {
        let g = parse_pcfg("S -> '1' [1.0]").unwrap();
        let err = build_dataset(&g, &BuildConfig::new(10, 2, 2, 0)).unwrap_err();
        assert!(matches!(err, DatasetError::InsufficientExamples { unique: 1, .. }));
    }

    #[test]
    fn splits_are_exact_and_disjoint() {
        let g = expr_grammar();
        let d = build_dataset(&g, &BuildConfig::new(3000, 200, 100, 9)).unwrap();
        assert_eq!(d.valid.len(), 200);
        assert_eq!(d.test.len(), 100);
        assert_eq!(d.train.len() + 300, d.manifest.unique);
        let mut all = HashSet::new();
        for e in d.train.iter().chain(&d.valid).chain(&d.test) {
            assert!(all.insert(e.expr.clone()), "duplicate {}", e.expr);
            assert!(e.cond[0] > -1.0 && e.cond[0] < 1.0);
            assert!(e.expr.len() <= 30);
            assert_eq!(eval_expr(&e.expr).value(), Some(e.value as i128));
            assert_eq!(decode(&e.tokens, &d.vocab).unwrap(), e.expr);
        }
        assert_eq!(d.vocab.len(), 19);
    }

    #[test]
    fn build_is_reproducible_and_roundtrips() {
        let g = expr_grammar();
        let mut cfg = BuildConfig::new(2000, 100, 100, 4);
        cfg.train_cap = Some(500);
        let a = build_dataset(&g, &cfg).unwrap();
        let b = build_dataset(&g, &cfg).unwrap();
        assert_eq!(a.train.len(), 500);
        assert_eq!(a.manifest, b.manifest);
        let dir = tempfile::tempdir().unwrap();
        a.write_dir(dir.path()).unwrap();
        let back = DatasetSplits::read_dir(dir.path()).unwrap();
        assert_eq!(back.train, a.train);
        assert_eq!(back.manifest, a.manifest);

        fs::write(dir.path().join("test.tsv"), "1+1\t2\n").unwrap();
        assert!(matches!(
            DatasetSplits::read_dir(dir.path()),
            Err(DatasetError::HashMismatch { .. })
        ));
    }

    #[test]
    fn tsv_rejects_wrong_values() {
        let v = Vocab::expression();
        assert!(examples_from_tsv("x", "1+1\t3\n", &v).is_err());
        assert!(examples_from_tsv("x", "1+1\n", &v).is_err());
        assert_eq!(examples_from_tsv("x", "1+1\t2\n", &v).unwrap()[0].value, 2);
    }
}
