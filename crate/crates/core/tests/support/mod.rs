//! Test oracles written independently of the library code.
#![allow(dead_code)]

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{Signed, Zero};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(BigInt),
    Op(char),
    Open,
    Close,
}

fn lex(s: &str) -> Option<Vec<Tok>> {
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        match b[i] {
            b'0'..=b'9' => {
                let start = i;
                while i < b.len() && b[i].is_ascii_digit() {
                    i += 1;
                }
                let lit = &s[start..i];
                if lit.len() > 1 && lit.starts_with('0') {
                    return None;
                }
                out.push(Tok::Num(lit.parse().ok()?));
                continue;
            }
            b'+' => out.push(Tok::Op('+')),
            b'-' => out.push(Tok::Op('-')),
            b'*' => out.push(Tok::Op('*')),
            b'/' => {
                if b.get(i + 1) != Some(&b'/') {
                    return None;
                }
                i += 1;
                out.push(Tok::Op('/'));
            }
            b'(' => out.push(Tok::Open),
            b')' => out.push(Tok::Close),
            _ => return None,
        }
        i += 1;
    }
    Some(out)
}

fn prec(op: char) -> u8 {
    if op == '+' || op == '-' {
        1
    } else {
        2
    }
}

fn apply(vals: &mut Vec<BigInt>, op: char) -> Option<()> {
    let b = vals.pop()?;
    let a = vals.pop()?;
    vals.push(match op {
        '+' => a + b,
        '-' => a - b,
        '*' => a * b,
        _ => {
            if b.is_zero() {
                return None;
            }
            a.div_floor(&b)
        }
    });
    Some(())
}

/// Exact value of an expression over `+ - * //` and parentheses, or `None`
/// for syntax errors and division by zero. Shunting-yard on big integers.
pub fn reference_eval(s: &str) -> Option<BigInt> {
    let toks = lex(s)?;
    let mut vals: Vec<BigInt> = Vec::new();
    let mut ops: Vec<Tok> = Vec::new();
    // true when the next token must start an operand
    let mut want_operand = true;
    for t in toks {
        match t {
            Tok::Num(n) => {
                if !want_operand {
                    return None;
                }
                vals.push(n);
                want_operand = false;
            }
            Tok::Open => {
                if !want_operand {
                    return None;
                }
                ops.push(Tok::Open);
            }
            Tok::Close => {
                if want_operand {
                    return None;
                }
                loop {
                    match ops.pop()? {
                        Tok::Open => break,
                        Tok::Op(o) => apply(&mut vals, o)?,
                        _ => return None,
                    }
                }
            }
            Tok::Op(o) => {
                if want_operand {
                    return None;
                }
                while let Some(Tok::Op(top)) = ops.last() {
                    if prec(*top) >= prec(o) {
                        let top = *top;
                        ops.pop();
                        apply(&mut vals, top)?;
                    } else {
                        break;
                    }
                }
                ops.push(Tok::Op(o));
                want_operand = true;
            }
        }
    }
    if want_operand {
        return None;
    }
    while let Some(t) = ops.pop() {
        match t {
            Tok::Op(o) => apply(&mut vals, o)?,
            _ => return None,
        }
    }
    if vals.len() == 1 {
        vals.pop()
    } else {
        None
    }
}

/// The dataset filter on top of [`reference_eval`]: at most 30 characters
/// and a value strictly inside (-1000, 1000).
pub fn reference_valid_value(s: &str) -> Option<i64> {
    if s.len() > 30 {
        return None;
    }
    let v = reference_eval(s)?;
    if v.abs() < BigInt::from(1000) {
        Some(v.try_into().ok()?)
    } else {
        None
    }
}

/// Levenshtein distance by the textbook dynamic program.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i; b.len() + 1];
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Total-variation distance between two distributions on the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
