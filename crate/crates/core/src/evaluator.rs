//! Integer expression evaluation with python semantics, and the property
//! oracles built on top of it.

use serde::{Deserialize, Serialize};

/// Longest expression accepted by the oracle.
pub const MAX_EXPR_CHARS: usize = 30;
/// Values must lie strictly inside `(-VALUE_BOUND, VALUE_BOUND)`.
pub const VALUE_BOUND: i128 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    ParseError,
    DivisionByZero,
    Overflow,
    OutOfRange,
    TooLong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalOutcome {
    Value(i128),
    Invalid(InvalidReason),
}

impl EvalOutcome {
    pub fn value(self) -> Option<i128> {
        match self {
            EvalOutcome::Value(v) => Some(v),
            EvalOutcome::Invalid(_) => None,
        }
    }
}

/// Evaluates `s` as a python integer expression over `+ - * //` and
/// parentheses. Never panics; every failure is an [`InvalidReason`].
pub fn eval_expr(s: &str) -> EvalOutcome {
    if s.len() > MAX_EXPR_CHARS {
        return EvalOutcome::Invalid(InvalidReason::TooLong);
    }
    let v = match Parser::new(s.as_bytes()).parse() {
        Ok(v) => v,
        Err(r) => return EvalOutcome::Invalid(r),
    };
    if v <= -VALUE_BOUND || v >= VALUE_BOUND {
        EvalOutcome::Invalid(InvalidReason::OutOfRange)
    } else {
        EvalOutcome::Value(v)
    }
}

pub fn is_valid(s: &str) -> bool {
    matches!(eval_expr(s), EvalOutcome::Value(_))
}

/// `a // b` rounding toward negative infinity.
pub fn floor_div(a: i128, b: i128) -> Result<i128, InvalidReason> {
    if b == 0 {
        return Err(InvalidReason::DivisionByZero);
    }
    let q = a.checked_div(b).ok_or(InvalidReason::Overflow)?;
    if a % b != 0 && ((a < 0) != (b < 0)) {
        Ok(q - 1)
    } else {
        Ok(q)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a [u8]) -> Self {
        Parser { src, pos: 0 }
    }

    fn parse(mut self) -> Result<i128, InvalidReason> {
        let v = self.expr()?;
        if self.pos != self.src.len() {
            return Err(InvalidReason::ParseError);
        }
        Ok(v)
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<i128, InvalidReason> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    acc = acc.checked_add(rhs).ok_or(InvalidReason::Overflow)?;
                }
                Some(b'-') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    acc = acc.checked_sub(rhs).ok_or(InvalidReason::Overflow)?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<i128, InvalidReason> {
        let mut acc = self.factor()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    acc = acc.checked_mul(rhs).ok_or(InvalidReason::Overflow)?;
                }
                Some(b'/') => {
                    // a lone `/` is not an operator here
                    if self.src.get(self.pos + 1) != Some(&b'/') {
                        return Err(InvalidReason::ParseError);
                    }
                    self.pos += 2;
                    let rhs = self.factor()?;
                    acc = floor_div(acc, rhs)?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn factor(&mut self) -> Result<i128, InvalidReason> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let v = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(InvalidReason::ParseError);
                }
                self.pos += 1;
                Ok(v)
            }
            Some(c) if c.is_ascii_digit() => self.number(),
            _ => Err(InvalidReason::ParseError),
        }
    }

    fn number(&mut self) -> Result<i128, InvalidReason> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        let digits = &self.src[start..self.pos];
        if digits.len() > 1 && digits[0] == b'0' {
            return Err(InvalidReason::ParseError);
        }
        let mut v: i128 = 0;
        for &d in digits {
            v = v
                .checked_mul(10)
                .and_then(|v| v.checked_add(i128::from(d - b'0')))
                .ok_or(InvalidReason::Overflow)?;
        }
        Ok(v)
    }
}

/// Number of binary operators in an expression (`//` counts once).
pub fn operator_count(s: &str) -> usize {
    let b = s.as_bytes();
    let mut n = 0;
    let mut i = 0;
    while i < b.len() {
        match b[i] {
            b'+' | b'-' | b'*' => n += 1,
            b'/' => {
                n += 1;
                if b.get(i + 1) == Some(&b'/') {
                    i += 1;
                }
            }
            _ => {}
        }
        i += 1;
    }
    n
}

/// A deterministic, total map from expression strings to property vectors.
pub trait PropertyOracle: Sync {
    fn arity(&self) -> usize;
    /// `None` when the string is invalid.
    fn evaluate(&self, s: &str) -> Option<Vec<f64>>;
}

/// The expression value as a one-dimensional property.
#[derive(Debug, Clone, Copy, Default)]
pub struct ValueOracle;

impl PropertyOracle for ValueOracle {
    fn arity(&self) -> usize {
        1
    }

    fn evaluate(&self, s: &str) -> Option<Vec<f64>> {
        eval_expr(s).value().map(|v| vec![v as f64])
    }
}

/// `[value, character length, operator count]` before standardization.
pub fn raw_properties(s: &str) -> Option<[f64; 3]> {
    let v = eval_expr(s).value()?;
    Some([v as f64, s.len() as f64, operator_count(s) as f64])
}

/// Three standardized properties of an expression: value, length and
/// operator count, each shifted and scaled by training-set statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiPropertyOracle {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl MultiPropertyOracle {
    /// Fits mean and standard deviation on the valid members of `exprs`.
    /// Constant dimensions get a unit scale.
    pub fn fit<'a>(exprs: impl IntoIterator<Item = &'a str>) -> Self {
        let rows: Vec<[f64; 3]> = exprs.into_iter().filter_map(raw_properties).collect();
        let n = rows.len().max(1) as f64;
        let mut mean = [0.0; 3];
        for r in &rows {
            for k in 0..3 {
                mean[k] += r[k] / n;
            }
        }
        let mut std = [0.0; 3];
        for r in &rows {
            for k in 0..3 {
                std[k] += (r[k] - mean[k]).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        MultiPropertyOracle { mean, std }
    }

    pub fn identity() -> Self {
        MultiPropertyOracle {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl PropertyOracle for MultiPropertyOracle {
    fn arity(&self) -> usize {
        3
    }

    fn evaluate(&self, s: &str) -> Option<Vec<f64>> {
        let raw = raw_properties(s)?;
        Some((0..3).map(|k| (raw[k] - self.mean[k]) / self.std[k]).collect())
    }
}
