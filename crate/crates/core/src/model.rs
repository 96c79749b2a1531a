//! Conditional autoregressive LSTM `p(x | y)`.
//!
//! At every step the input is `[embedding(x_{t-1}) | y]`, fed through a stack
//! of LSTM layers and projected to vocabulary logits. Sequences start with
//! `START`, which is never predicted, and end with `STOP`, which is.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::dataset::{TokenSequence, START, STOP};
use crate::nn::linalg::{gemm, gemm_a_bt, gemm_at_b};
use crate::nn::lstm::{cell_backward, cell_forward, CellCache, CellShape};
use crate::nn::ops::{log_softmax, softmax, softmax_backward, softmax_into};
use crate::nn::params::{read_checkpoint_body, read_checkpoint_header, write_checkpoint, Param, ParameterSet};
use crate::nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_len {max}")]
    Overlong { len: usize, max: usize },
    #[error("conditioning vector has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("malformed sequence: {0}")]
    Malformed(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub cond_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// Longest token sequence, START and STOP included.
    pub max_len: usize,
}

impl ModelConfig {
    /// Embed 64, hidden 128, two layers, sequences of up to 32 tokens.
    pub fn desk(vocab_size: usize, cond_dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 64,
            cond_dim,
            hidden_dim: 128,
            num_layers: 2,
            max_len: 32,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("cond_dim", self.cond_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= STOP {
            return Err(ModelError::InvalidConfig("vocab must contain PAD, START and STOP".into()));
        }
        if self.max_len < 2 {
            return Err(ModelError::InvalidConfig("max_len must be at least 2".into()));
        }
        Ok(())
    }

    fn words(&self) -> Vec<u32> {
        [
            self.vocab_size,
            self.embed_dim,
            self.cond_dim,
            self.hidden_dim,
            self.num_layers,
            self.max_len,
        ]
        .iter()
        .map(|&v| v as u32)
        .collect()
    }

    fn from_words(w: &[u32]) -> Result<Self, ModelError> {
        if w.len() != 6 {
            return Err(NnError::BadCheckpoint(format!("expected 6 config words, found {}", w.len())).into());
        }
        let c = ModelConfig {
            vocab_size: w[0] as usize,
            embed_dim: w[1] as usize,
            cond_dim: w[2] as usize,
            hidden_dim: w[3] as usize,
            num_layers: w[4] as usize,
            max_len: w[5] as usize,
        };
        c.validate()?;
        Ok(c)
    }

    fn cell(&self, layer: usize) -> CellShape {
        CellShape {
            input: if layer == 0 { self.embed_dim + self.cond_dim } else { self.hidden_dim },
            hidden: self.hidden_dim,
        }
    }
}

const EMB: usize = 0;

/// Input of one unrolled step.
#[derive(Debug, Clone)]
enum StepInput {
    Tokens(Vec<usize>),
    /// Single row, probability-weighted embedding of the previous step's
    /// softmax. Gradients flow back into those logits.
    Soft(Vec<f64>),
}

#[derive(Debug, Clone)]
struct StepRecord {
    rows: usize,
    input: StepInput,
    layers: Vec<CellCache>,
    /// `rows × vocab`
    logits: Vec<f64>,
}

/// Activations of one batched forward pass. Rows are reordered by length,
/// longest first, so the rows alive at step `t` are always a prefix.
#[derive(Debug, Clone)]
pub struct Tape {
    order: Vec<usize>,
    steps: Vec<StepRecord>,
}

impl Tape {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Rows alive at step `t`.
    pub fn rows_at(&self, t: usize) -> usize {
        self.steps[t].rows
    }

    /// Caller row index of tape position `pos`.
    pub fn row_id(&self, pos: usize) -> usize {
        self.order[pos]
    }

    /// `rows_at(t) × vocab` logits in tape order.
    pub fn logits_at(&self, t: usize) -> &[f64] {
        &self.steps[t].logits
    }

    /// Zeroed gradient buffers shaped like the logits.
    pub fn zero_dlogits(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| vec![0.0; s.logits.len()]).collect()
    }
}

/// Recurrent state for incremental decoding.
#[derive(Debug, Clone)]
pub struct DecodeState {
    h: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalLstm {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl ConditionalLstm {
    /// All parameters zero. Every step distribution is uniform.
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParameterSet::default();
        params.add(Param::zeros("embedding", config.vocab_size, config.embed_dim));
        for l in 0..config.num_layers {
            let shape = config.cell(l);
            params.add(Param::zeros(format!("lstm{l}.weight"), shape.fan_in(), 4 * config.hidden_dim));
            params.add(Param::zeros(format!("lstm{l}.bias"), 1, 4 * config.hidden_dim));
        }
        params.add(Param::zeros("output.weight", config.hidden_dim, config.vocab_size));
        params.add(Param::zeros("output.bias", 1, config.vocab_size));
        Ok(ConditionalLstm { config, params })
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases except the forget gate
    /// at 1.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        let mut m = Self::zeros(config)?;
        let h = config.hidden_dim;
        m.params.init_uniform(EMB, config.vocab_size, rng);
        for l in 0..config.num_layers {
            let (wi, bi) = (m.w_idx(l), m.b_idx(l));
            m.params.init_uniform(wi, config.cell(l).fan_in(), rng);
            m.params.params[bi].value[h..2 * h].fill(1.0);
        }
        let out = m.out_w_idx();
        m.params.init_uniform(out, h, rng);
        Ok(m)
    }

    fn w_idx(&self, layer: usize) -> usize {
        1 + 2 * layer
    }

    fn b_idx(&self, layer: usize) -> usize {
        2 + 2 * layer
    }

    fn out_w_idx(&self) -> usize {
        1 + 2 * self.config.num_layers
    }

    fn out_b_idx(&self) -> usize {
        2 + 2 * self.config.num_layers
    }

    fn check_cond(&self, cond: &[f64]) -> Result<(), ModelError> {
        if cond.len() != self.config.cond_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.config.cond_dim,
                got: cond.len(),
            });
        }
        Ok(())
    }

    /// Checks a prefix fed as model input: starts with START, no STOP
    /// afterwards, fits in `max_len`. PAD and START may appear later since
    /// the model can emit them.
    fn check_prefix(&self, prefix: &[usize]) -> Result<(), ModelError> {
        if prefix.first() != Some(&START) {
            return Err(ModelError::Malformed("sequence must begin with START".into()));
        }
        if prefix.len() > self.config.max_len {
            return Err(ModelError::Overlong {
                len: prefix.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&k) = prefix[1..].iter().find(|&&k| k >= self.config.vocab_size || k == STOP) {
            return Err(ModelError::Malformed(format!("token {k} inside prefix")));
        }
        Ok(())
    }

    /// Checks a scored sequence: `START … STOP`, or a truncated run of
    /// exactly `max_len` tokens without STOP.
    fn check_sequence(&self, seq: &[usize]) -> Result<(), ModelError> {
        if seq.len() > self.config.max_len {
            return Err(ModelError::Overlong {
                len: seq.len(),
                max: self.config.max_len,
            });
        }
        let ends = seq.len() >= 2 && seq.last() == Some(&STOP);
        if !ends && seq.len() != self.config.max_len {
            return Err(ModelError::Malformed("sequence must end with STOP".into()));
        }
        let body = if ends { &seq[..seq.len() - 1] } else { seq };
        self.check_prefix(body)
    }

    /// One LSTM cell application for a single row: returns `(h', c')`.
    pub fn lstm_step(&self, layer: usize, input: &[f64], h: &[f64], c: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        if layer >= self.config.num_layers {
            return Err(NnError::IndexOutOfRange {
                index: layer,
                len: self.config.num_layers,
            }
            .into());
        }
        let shape = self.config.cell(layer);
        if input.len() != shape.input || h.len() != shape.hidden || c.len() != shape.hidden {
            return Err(NnError::ShapeMismatch(format!(
                "layer {layer} takes input {} and state {}",
                shape.input, shape.hidden
            ))
            .into());
        }
        let k = cell_forward(
            shape,
            &self.params.params[self.w_idx(layer)].value,
            &self.params.params[self.b_idx(layer)].value,
            input,
            h,
            c,
            1,
        );
        Ok((k.h, k.c))
    }

    /// Layer-0 input rows `[embedding | cond]` for hard tokens.
    fn embed_rows(&self, tokens: &[usize], conds: &[f64]) -> Vec<f64> {
        let (e, cd) = (self.config.embed_dim, self.config.cond_dim);
        let emb = &self.params.params[EMB].value;
        let mut x = Vec::with_capacity(tokens.len() * (e + cd));
        for (r, &tok) in tokens.iter().enumerate() {
            x.extend_from_slice(&emb[tok * e..(tok + 1) * e]);
            x.extend_from_slice(&conds[r * cd..(r + 1) * cd]);
        }
        x
    }

    fn embed_soft(&self, probs: &[f64], cond: &[f64]) -> Vec<f64> {
        let (d, e) = (self.config.vocab_size, self.config.embed_dim);
        let mut x = vec![0.0; e];
        gemm(1, d, e, probs, &self.params.params[EMB].value, 0.0, &mut x);
        x.extend_from_slice(cond);
        x
    }

    /// Runs the layer stack and output projection for one step of `rows`
    /// rows, given the previous step's states (at least `rows` rows each).
    fn step_forward(&self, x: Vec<f64>, rows: usize, prev: Option<&[CellCache]>) -> (Vec<CellCache>, Vec<f64>) {
        let cfg = &self.config;
        let (nh, d) = (cfg.hidden_dim, cfg.vocab_size);
        let zeros = vec![0.0; rows * nh];
        let mut caches = Vec::with_capacity(cfg.num_layers);
        let mut input = x;
        for l in 0..cfg.num_layers {
            let (hp, cp) = match prev {
                Some(p) => (&p[l].h[..rows * nh], &p[l].c[..rows * nh]),
                None => (&zeros[..], &zeros[..]),
            };
            let cache = cell_forward(
                cfg.cell(l),
                &self.params.params[self.w_idx(l)].value,
                &self.params.params[self.b_idx(l)].value,
                &input,
                hp,
                cp,
                rows,
            );
            input = cache.h.clone();
            caches.push(cache);
        }
        let mut logits = vec![0.0; rows * d];
        let ob = &self.params.params[self.out_b_idx()].value;
        for r in 0..rows {
            logits[r * d..(r + 1) * d].copy_from_slice(ob);
        }
        gemm(rows, nh, d, &input, &self.params.params[self.out_w_idx()].value, 1.0, &mut logits);
        (caches, logits)
    }

    /// Teacher-forced forward. Row `i` consumes `inputs[i]` one token per
    /// step and yields one logit row per input token.
    pub fn forward(&self, inputs: &[&[usize]], conds: &[&[f64]]) -> Result<Tape, ModelError> {
        if inputs.len() != conds.len() {
            return Err(NnError::ShapeMismatch("one conditioning vector per row".into()).into());
        }
        for (inp, c) in inputs.iter().zip(conds) {
            self.check_prefix(inp)?;
            self.check_cond(c)?;
        }
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(inputs[i].len()));
        let cond_flat: Vec<f64> = order.iter().flat_map(|&i| conds[i].iter().copied()).collect();
        let n_steps = order.first().map_or(0, |&i| inputs[i].len());
        let mut steps: Vec<StepRecord> = Vec::with_capacity(n_steps);
        for t in 0..n_steps {
            let rows = order.iter().take_while(|&&i| inputs[i].len() > t).count();
            let tokens: Vec<usize> = order[..rows].iter().map(|&i| inputs[i][t]).collect();
            let x = self.embed_rows(&tokens, &cond_flat);
            let (layers, logits) = self.step_forward(x, rows, steps.last().map(|s| &s.layers[..]));
            steps.push(StepRecord {
                rows,
                input: StepInput::Tokens(tokens),
                layers,
                logits,
            });
        }
        Ok(Tape { order, steps })
    }

    /// Teacher-forced forward over scored sequences (see `check_sequence`);
    /// step `t` predicts `seq[t + 1]`.
    pub fn forward_sequences(&self, seqs: &[&[usize]], conds: &[&[f64]]) -> Result<Tape, ModelError> {
        for s in seqs {
            self.check_sequence(s)?;
        }
        let inputs: Vec<&[usize]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
        self.forward(&inputs, conds)
    }

    /// Single-row unroll over `max_len - 1` steps where every step after the
    /// first is fed the probability-weighted mean embedding of the previous
    /// step's distribution.
    pub fn forward_soft(&self, cond: &[f64]) -> Result<Tape, ModelError> {
        self.check_cond(cond)?;
        let n_steps = self.config.max_len - 1;
        let mut steps: Vec<StepRecord> = Vec::with_capacity(n_steps);
        for t in 0..n_steps {
            let (input, x) = if t == 0 {
                (StepInput::Tokens(vec![START]), self.embed_rows(&[START], cond))
            } else {
                let p = softmax(&steps[t - 1].logits);
                let x = self.embed_soft(&p, cond);
                (StepInput::Soft(p), x)
            };
            let (layers, logits) = self.step_forward(x, 1, steps.last().map(|s| &s.layers[..]));
            steps.push(StepRecord {
                rows: 1,
                input,
                layers,
                logits,
            });
        }
        Ok(Tape { order: vec![0], steps })
    }

    /// Accumulates parameter gradients for a loss whose gradient with
    /// respect to each step's logits is `dlogits` (tape layout). Gradients
    /// reaching soft inputs are pushed back into the previous step's logits.
    pub fn backward(&mut self, tape: &Tape, mut dlogits: Vec<Vec<f64>>) -> Result<(), ModelError> {
        if dlogits.len() != tape.steps.len() || dlogits.iter().zip(&tape.steps).any(|(d, s)| d.len() != s.logits.len()) {
            return Err(NnError::ShapeMismatch("dlogits must match the tape".into()).into());
        }
        let cfg = self.config;
        let (nh, d, e, cd) = (cfg.hidden_dim, cfg.vocab_size, cfg.embed_dim, cfg.cond_dim);
        let nl = cfg.num_layers;
        let (ow, ob) = (self.out_w_idx(), self.out_b_idx());
        let mut dh_next: Vec<Vec<f64>> = vec![Vec::new(); nl];
        let mut dc_next: Vec<Vec<f64>> = vec![Vec::new(); nl];
        for t in (0..tape.steps.len()).rev() {
            let step = &tape.steps[t];
            let rows = step.rows;
            let dl = std::mem::take(&mut dlogits[t]);
            let top = &step.layers[nl - 1];
            gemm_at_b(rows, nh, d, &top.h, &dl, &mut self.params.params[ow].grad);
            for r in 0..rows {
                for (g, v) in self.params.params[ob].grad.iter_mut().zip(&dl[r * d..(r + 1) * d]) {
                    *g += v;
                }
            }
            let mut dh_above = vec![0.0; rows * nh];
            gemm_a_bt(rows, d, nh, &dl, &self.params.params[ow].value, 0.0, &mut dh_above);
            let mut dx0 = Vec::new();
            for l in (0..nl).rev() {
                let mut dh = dh_above;
                let mut dc = vec![0.0; rows * nh];
                for (a, b) in dh.iter_mut().zip(&dh_next[l]) {
                    *a += b;
                }
                dc[..dc_next[l].len()].copy_from_slice(&dc_next[l]);
                let (wi, bi) = (self.w_idx(l), self.b_idx(l));
                let [w, b] = self.params.params.get_disjoint_mut([wi, bi]).expect("distinct indices");
                let g = cell_backward(cfg.cell(l), &step.layers[l], &w.value, &mut w.grad, &mut b.grad, &dh, &dc);
                dh_next[l] = g.dh_prev;
                dc_next[l] = g.dc_prev;
                if l == 0 {
                    dx0 = g.dx;
                    dh_above = Vec::new();
                } else {
                    dh_above = g.dx;
                }
            }
            match &step.input {
                StepInput::Tokens(tokens) => {
                    let emb = &mut self.params.params[EMB].grad;
                    for (r, &tok) in tokens.iter().enumerate() {
                        let src = &dx0[r * (e + cd)..r * (e + cd) + e];
                        for (g, v) in emb[tok * e..(tok + 1) * e].iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                }
                StepInput::Soft(p) => {
                    let dxe = &dx0[..e];
                    gemm_at_b(1, d, e, p, dxe, &mut self.params.params[EMB].grad);
                    let mut dp = vec![0.0; d];
                    gemm_a_bt(1, e, d, dxe, &self.params.params[EMB].value, 0.0, &mut dp);
                    softmax_backward(p, &dp, &mut dlogits[t - 1]);
                }
            }
        }
        Ok(())
    }

    /// `log p(seq | cond)` for a complete `START … STOP` sequence. For a
    /// truncated sequence of `max_len` tokens this is the probability of
    /// generating that prefix.
    pub fn log_prob(&self, seq: &[usize], cond: &[f64]) -> Result<f64, ModelError> {
        Ok(self.log_probs(&[seq], &[cond])?[0])
    }

    /// Batched [`log_prob`](Self::log_prob). Anything after the first STOP
    /// of a row is ignored, so padded rows may be passed directly.
    pub fn log_probs(&self, seqs: &[&[usize]], conds: &[&[f64]]) -> Result<Vec<f64>, ModelError> {
        let trimmed: Vec<&[usize]> = seqs.iter().map(|s| trim_after_stop(s)).collect();
        let tape = self.forward_sequences(&trimmed, conds)?;
        let d = self.config.vocab_size;
        let mut out = vec![0.0; seqs.len()];
        for t in 0..tape.num_steps() {
            let logits = tape.logits_at(t);
            for pos in 0..tape.rows_at(t) {
                let row = tape.row_id(pos);
                let lp = log_softmax(&logits[pos * d..(pos + 1) * d]);
                out[row] += lp[trimmed[row][t + 1]];
            }
        }
        Ok(out)
    }

    /// Weighted negative log-likelihood `Σ_i w_i · (−log p(seq_i | cond_i))`
    /// with its gradient accumulated into the parameters. Returns the loss
    /// and the unweighted per-sequence NLLs.
    pub fn nll_grad(&mut self, seqs: &[&[usize]], conds: &[&[f64]], weights: &[f64]) -> Result<(f64, Vec<f64>), ModelError> {
        if weights.len() != seqs.len() {
            return Err(NnError::ShapeMismatch("one weight per sequence".into()).into());
        }
        let tape = self.forward_sequences(seqs, conds)?;
        let d = self.config.vocab_size;
        let mut dlogits = tape.zero_dlogits();
        let mut nll = vec![0.0; seqs.len()];
        let mut p = vec![0.0; d];
        for t in 0..tape.num_steps() {
            let logits = tape.logits_at(t);
            for pos in 0..tape.rows_at(t) {
                let row = tape.row_id(pos);
                let z = &logits[pos * d..(pos + 1) * d];
                let target = seqs[row][t + 1];
                let lse = crate::nn::ops::logsumexp(z);
                nll[row] += lse - z[target];
                softmax_into(z, &mut p);
                let w = weights[row];
                let g = &mut dlogits[t][pos * d..(pos + 1) * d];
                for k in 0..d {
                    g[k] = w * p[k];
                }
                g[target] -= w;
            }
        }
        self.backward(&tape, dlogits)?;
        let loss = nll.iter().zip(weights).map(|(l, w)| l * w).sum();
        Ok((loss, nll))
    }

    /// Next-token distribution after `prefix` (which starts with START).
    pub fn step_distribution(&self, prefix: &[usize], cond: &[f64]) -> Result<Vec<f64>, ModelError> {
        if prefix.len() >= self.config.max_len {
            return Err(ModelError::Overlong {
                len: prefix.len() + 1,
                max: self.config.max_len,
            });
        }
        let tape = self.forward(&[prefix], &[cond])?;
        Ok(softmax(tape.logits_at(tape.num_steps() - 1)))
    }

    fn decode_start(&self, rows: usize) -> DecodeState {
        let nh = self.config.hidden_dim;
        DecodeState {
            h: vec![vec![0.0; rows * nh]; self.config.num_layers],
            c: vec![vec![0.0; rows * nh]; self.config.num_layers],
        }
    }

    /// Single-row state before START is consumed.
    pub fn start_state(&self) -> DecodeState {
        self.decode_start(1)
    }

    /// Feeds `token` to a single-row state and returns the next-token
    /// distribution.
    pub fn advance(&self, state: &mut DecodeState, token: usize, cond: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_cond(cond)?;
        if token >= self.config.vocab_size {
            return Err(NnError::IndexOutOfRange {
                index: token,
                len: self.config.vocab_size,
            }
            .into());
        }
        Ok(softmax(&self.decode_step(state, &[token], cond)))
    }

    /// Advances `state` by one token per row and returns `rows × vocab`
    /// logits.
    fn decode_step(&self, state: &mut DecodeState, tokens: &[usize], conds: &[f64]) -> Vec<f64> {
        let cfg = &self.config;
        let rows = tokens.len();
        let (nh, d) = (cfg.hidden_dim, cfg.vocab_size);
        let mut input = self.embed_rows(tokens, conds);
        for l in 0..cfg.num_layers {
            let k = cell_forward(
                cfg.cell(l),
                &self.params.params[self.w_idx(l)].value,
                &self.params.params[self.b_idx(l)].value,
                &input,
                &state.h[l],
                &state.c[l],
                rows,
            );
            state.c[l] = k.c;
            state.h[l] = k.h;
            input = state.h[l].clone();
        }
        let mut logits = vec![0.0; rows * d];
        let ob = &self.params.params[self.out_b_idx()].value;
        for r in 0..rows {
            logits[r * d..(r + 1) * d].copy_from_slice(ob);
        }
        gemm(rows, nh, d, &input, &self.params.params[self.out_w_idx()].value, 1.0, &mut logits);
        logits
    }

    /// Shared decoding loop. `choose(row, probs)` picks the next token.
    /// Rows end at STOP or after `max_len - 1` generated tokens.
    pub fn decode_batch<F>(&self, conds: &[&[f64]], max_len: usize, mut choose: F) -> Result<Vec<TokenSequence>, ModelError>
    where
        F: FnMut(usize, &[f64]) -> usize,
    {
        for c in conds {
            self.check_cond(c)?;
        }
        let max_len = max_len.min(self.config.max_len);
        let (nh, d, cd) = (self.config.hidden_dim, self.config.vocab_size, self.config.cond_dim);
        let mut out: Vec<Vec<usize>> = vec![vec![START]; conds.len()];
        let mut alive: Vec<usize> = (0..conds.len()).collect();
        let mut cond_flat: Vec<f64> = conds.iter().flat_map(|c| c.iter().copied()).collect();
        let mut state = self.decode_start(conds.len());
        let mut probs = vec![0.0; d];
        for _ in 1..max_len {
            if alive.is_empty() {
                break;
            }
            let tokens: Vec<usize> = alive.iter().map(|&i| *out[i].last().unwrap()).collect();
            let logits = self.decode_step(&mut state, &tokens, &cond_flat);
            let mut keep = Vec::with_capacity(alive.len());
            for (pos, &row) in alive.iter().enumerate() {
                softmax_into(&logits[pos * d..(pos + 1) * d], &mut probs);
                let tok = choose(row, &probs);
                out[row].push(tok);
                keep.push(tok != STOP);
            }
            if keep.iter().all(|&k| k) {
                continue;
            }
            let mut w = 0;
            for r in 0..alive.len() {
                if keep[r] {
                    if w != r {
                        alive[w] = alive[r];
                        for l in 0..self.config.num_layers {
                            state.h[l].copy_within(r * nh..(r + 1) * nh, w * nh);
                            state.c[l].copy_within(r * nh..(r + 1) * nh, w * nh);
                        }
                        cond_flat.copy_within(r * cd..(r + 1) * cd, w * cd);
                    }
                    w += 1;
                }
            }
            alive.truncate(w);
            for l in 0..self.config.num_layers {
                state.h[l].truncate(w * nh);
                state.c[l].truncate(w * nh);
            }
            cond_flat.truncate(w * cd);
        }
        Ok(out.into_iter().map(TokenSequence).collect())
    }

    /// Ancestral sampling at temperature 1, one row per conditioning vector.
    /// Truncated rows come back without STOP.
    pub fn sample_batch<R: Rng + ?Sized>(&self, conds: &[&[f64]], max_len: usize, rng: &mut R) -> Result<Vec<TokenSequence>, ModelError> {
        self.decode_batch(conds, max_len, |_, p| {
            let u: f64 = rng.random();
            sample_index(p, u)
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, cond: &[f64], max_len: usize, rng: &mut R) -> Result<TokenSequence, ModelError> {
        Ok(self.sample_batch(&[cond], max_len, rng)?.pop().unwrap())
    }

    /// Argmax decoding; ties go to the lowest token index.
    pub fn greedy_batch(&self, conds: &[&[f64]], max_len: usize) -> Result<Vec<TokenSequence>, ModelError> {
        self.decode_batch(conds, max_len, |_, p| argmax(p))
    }

    pub fn greedy_decode(&self, cond: &[f64], max_len: usize) -> Result<TokenSequence, ModelError> {
        Ok(self.greedy_batch(&[cond], max_len)?.pop().unwrap())
    }

    pub fn save(&self, path: &Path, with_adam: bool) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&mut w, &self.config.words(), &self.params, with_adam)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut r = BufReader::new(File::open(path)?);
        let config = ModelConfig::from_words(&read_checkpoint_header(&mut r)?)?;
        let mut m = Self::zeros(config)?;
        read_checkpoint_body(&mut r, &mut m.params)?;
        Ok(m)
    }

    /// Checkpoint bytes, used for hashing and bitwise comparisons.
    pub fn to_bytes(&self, with_adam: bool) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &self.config.words(), &self.params, with_adam).expect("writing to memory");
        buf
    }
}

/// `seq` up to and including its first STOP.
pub fn trim_after_stop(seq: &[usize]) -> &[usize] {
    match seq.iter().position(|&k| k == STOP) {
        Some(i) => &seq[..=i],
        None => seq,
    }
}

/// Lowest index among the maxima.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = k;
        }
    }
    best
}

/// Inverse-CDF draw from `p` using the uniform `u`.
pub fn sample_index(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return k;
        }
    }
    // rounding left a sliver above the last cumulative sum
    p.iter().rposition(|&v| v > 0.0).unwrap_or(p.len() - 1)
}
