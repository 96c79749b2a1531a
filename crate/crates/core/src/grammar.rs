//! Weighted context-free grammars: a small text format, validation, and
//! seeded leftmost-derivation sampling.
//!
//! File format, one nonterminal per logical block:
//!
//! ```text
//! # comment
//! Expr -> Number [0.4] | Expr Op Expr [0.4] |
//!         L Expr Op Expr R [0.2]
//! Op -> '+' [0.5] | '//' [0.5]
//! ```
//!
//! A line containing `->` opens a new block, any other non-blank line
//! continues the previous one. Quoted symbols and bare single characters are
//! terminals; bare words starting with an uppercase letter are nonterminals.
//! The first block's left-hand side is the start symbol.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// The expression grammar used for the reference task.
pub const EXPR_GRAMMAR: &str = include_str!("../assets/expr.pcfg");

/// Rule sums further than this from one are rejected. Sums closer than this
/// (e.g. nine rules at `0.1111`) are renormalized.
pub const SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum GrammarError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("probabilities for `{nonterminal}` sum to {sum}, expected 1")]
    ProbabilitySum { nonterminal: String, sum: f64 },
    #[error("symbol `{0}` is used but has no rules")]
    UndefinedSymbol(String),
    #[error("nonterminal `{0}` is defined twice")]
    DuplicateNonterminal(String),
    #[error("grammar has no rules")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Symbol {
    Terminal(String),
    Nonterminal(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Production {
    pub symbols: Vec<Symbol>,
    pub probability: f64,
}

/// A validated probabilistic context-free grammar.
#[derive(Debug, Clone, PartialEq)]
pub struct Pcfg {
    names: Vec<String>,
    rules: Vec<Vec<Production>>,
    start: usize,
    source_hash: String,
}

/// Limits on a single derivation. Exceeding either aborts the derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DerivationBudget {
    pub max_expansion_depth: usize,
    pub max_output_chars: usize,
}

impl Default for DerivationBudget {
    fn default() -> Self {
        DerivationBudget {
            max_expansion_depth: 64,
            max_output_chars: 64,
        }
    }
}

impl DerivationBudget {
    pub fn new(max_expansion_depth: usize, max_output_chars: usize) -> Option<Self> {
        (max_expansion_depth > 0 && max_output_chars > 0).then_some(DerivationBudget {
            max_expansion_depth,
            max_output_chars,
        })
    }
}

/// Result of one derivation attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Derivation {
    Complete(String),
    BudgetExceeded,
}

impl Derivation {
    pub fn into_option(self) -> Option<String> {
        match self {
            Derivation::Complete(s) => Some(s),
            Derivation::BudgetExceeded => None,
        }
    }
}

/// Per-rule expansion counts, indexed `[nonterminal][rule]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleUsage {
    pub counts: Vec<Vec<u64>>,
}

impl RuleUsage {
    pub fn for_grammar(g: &Pcfg) -> Self {
        RuleUsage {
            counts: g.rules.iter().map(|r| vec![0; r.len()]).collect(),
        }
    }
}

impl Pcfg {
    pub fn start_symbol(&self) -> usize {
        self.start
    }

    pub fn nonterminal_names(&self) -> &[String] {
        &self.names
    }

    pub fn nonterminal(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn rules(&self, nonterminal: usize) -> &[Production] {
        &self.rules[nonterminal]
    }

    /// SHA-256 of the grammar source text, hex encoded.
    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    /// Every terminal string appearing on a right-hand side.
    pub fn terminals(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .rules
            .iter()
            .flatten()
            .flat_map(|p| p.symbols.iter())
            .filter_map(|s| match s {
                Symbol::Terminal(t) => Some(t.as_str()),
                Symbol::Nonterminal(_) => None,
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Leftmost derivation from the start symbol.
    pub fn sample_derivation<R: Rng + ?Sized>(
        &self,
        budget: DerivationBudget,
        rng: &mut R,
    ) -> Derivation {
        self.derive(budget, rng, |_, _| {})
    }

    /// Like [`Pcfg::sample_derivation`], additionally tallying every rule
    /// choice (including those of derivations that run out of budget).
    pub fn sample_with_usage<R: Rng + ?Sized>(
        &self,
        budget: DerivationBudget,
        rng: &mut R,
        usage: &mut RuleUsage,
    ) -> Derivation {
        self.derive(budget, rng, |nt, rule| usage.counts[nt][rule] += 1)
    }

    fn derive<R: Rng + ?Sized>(
        &self,
        budget: DerivationBudget,
        rng: &mut R,
        mut on_choice: impl FnMut(usize, usize),
    ) -> Derivation {
        let mut out = String::new();
        // (symbol, depth); symbols pushed in reverse so the leftmost pops first.
        let mut stack: Vec<(&Symbol, usize)> = Vec::new();
        let start = Symbol::Nonterminal(self.start);
        stack.push((&start, 0));
        while let Some((sym, depth)) = stack.pop() {
            match sym {
                Symbol::Terminal(t) => {
                    out.push_str(t);
                    if out.len() > budget.max_output_chars {
                        return Derivation::BudgetExceeded;
                    }
                }
                Symbol::Nonterminal(nt) => {
                    if depth >= budget.max_expansion_depth {
                        return Derivation::BudgetExceeded;
                    }
                    let rules = &self.rules[*nt];
                    let idx = choose_rule(rules, rng);
                    on_choice(*nt, idx);
                    for s in rules[idx].symbols.iter().rev() {
                        stack.push((s, depth + 1));
                    }
                }
            }
        }
        Derivation::Complete(out)
    }
}

fn choose_rule<R: Rng + ?Sized>(rules: &[Production], rng: &mut R) -> usize {
    if rules.len() == 1 {
        return 0;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, r) in rules.iter().enumerate() {
        acc += r.probability;
        if u < acc {
            return i;
        }
    }
    rules.len() - 1
}

impl fmt::Display for Pcfg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (nt, rules) in self.rules.iter().enumerate() {
            write!(f, "{} ->", self.names[nt])?;
            for (k, p) in rules.iter().enumerate() {
                if k > 0 {
                    write!(f, " |")?;
                }
                for s in &p.symbols {
                    match s {
                        Symbol::Terminal(t) => write!(f, " '{t}'")?,
                        Symbol::Nonterminal(n) => write!(f, " {}", self.names[*n])?,
                    }
                }
                write!(f, " [{}]", p.probability)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Arrow,
    Bar,
    Prob(f64),
    Quoted(String),
    Bare(String),
}

#[derive(Debug)]
struct Spanned {
    tok: Tok,
    line: usize,
    column: usize,
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> GrammarError {
    GrammarError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

fn tokenize_line(line_no: usize, line: &str, out: &mut Vec<Spanned>) -> Result<(), GrammarError> {
    let chars: Vec<char> = line.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        let push = |out: &mut Vec<Spanned>, tok| {
            out.push(Spanned {
                tok,
                line: line_no,
                column,
            })
        };
        match c {
            '#' => break,
            c if c.is_whitespace() => i += 1,
            '|' => {
                push(out, Tok::Bar);
                i += 1;
            }
            '-' if chars.get(i + 1) == Some(&'>') => {
                push(out, Tok::Arrow);
                i += 2;
            }
            '[' => {
                let close = chars[i..]
                    .iter()
                    .position(|&c| c == ']')
                    .ok_or_else(|| syntax(line_no, column, "unterminated probability"))?;
                let body: String = chars[i + 1..i + close].iter().collect();
                let p: f64 = body
                    .trim()
                    .parse()
                    .map_err(|_| syntax(line_no, column, format!("bad probability `{body}`")))?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(syntax(line_no, column, format!("probability {p} outside [0,1]")));
                }
                push(out, Tok::Prob(p));
                i += close + 1;
            }
            '\'' | '"' => {
                let close = chars[i + 1..]
                    .iter()
                    .position(|&q| q == c)
                    .ok_or_else(|| syntax(line_no, column, "unterminated quoted terminal"))?;
                let body: String = chars[i + 1..i + 1 + close].iter().collect();
                if body.is_empty() {
                    return Err(syntax(line_no, column, "empty terminal"));
                }
                push(out, Tok::Quoted(body));
                i += close + 2;
            }
            _ => {
                let start = i;
                while i < chars.len()
                    && !chars[i].is_whitespace()
                    && !matches!(chars[i], '|' | '[' | '#' | '\'' | '"')
                    && !(chars[i] == '-' && chars.get(i + 1) == Some(&'>'))
                {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                push(out, Tok::Bare(word));
            }
        }
    }
    Ok(())
}

/// Parses and validates a grammar file.
pub fn parse_pcfg(text: &str) -> Result<Pcfg, GrammarError> {
    // Split into logical blocks, each a token list starting at `LHS ->`.
    let mut blocks: Vec<Vec<Spanned>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut toks = Vec::new();
        tokenize_line(n + 1, line, &mut toks)?;
        if toks.is_empty() {
            continue;
        }
        if toks.iter().any(|t| t.tok == Tok::Arrow) {
            blocks.push(toks);
        } else if let Some(last) = blocks.last_mut() {
            last.extend(toks);
        } else {
            let t = &toks[0];
            return Err(syntax(t.line, t.column, "continuation line before any rule"));
        }
    }
    if blocks.is_empty() {
        return Err(GrammarError::Empty);
    }

    // First pass: collect left-hand sides.
    let mut names = Vec::new();
    let mut index = HashMap::new();
    for block in &blocks {
        let lhs = &block[0];
        let name = match &lhs.tok {
            Tok::Bare(w) if is_nonterminal_name(w) => w.clone(),
            _ => return Err(syntax(lhs.line, lhs.column, "expected a capitalized nonterminal")),
        };
        match block.get(1) {
            Some(Spanned { tok: Tok::Arrow, .. }) => {}
            Some(t) => return Err(syntax(t.line, t.column, "expected `->`")),
            None => return Err(syntax(lhs.line, lhs.column, "expected `->`")),
        }
        if index.insert(name.clone(), names.len()).is_some() {
            return Err(GrammarError::DuplicateNonterminal(name));
        }
        names.push(name);
    }

    // Second pass: productions.
    let mut rules = Vec::with_capacity(blocks.len());
    for block in &blocks {
        let mut prods = Vec::new();
        let mut symbols = Vec::new();
        let mut expect_bar = false;
        let mut last_pos = (block[1].line, block[1].column);
        for t in &block[2..] {
            last_pos = (t.line, t.column);
            if expect_bar {
                if t.tok != Tok::Bar {
                    return Err(syntax(t.line, t.column, "expected `|` after probability"));
                }
                expect_bar = false;
                continue;
            }
            match &t.tok {
                Tok::Quoted(s) => symbols.push(Symbol::Terminal(s.clone())),
                Tok::Bare(w) if is_nonterminal_name(w) => match index.get(w) {
                    Some(&nt) => symbols.push(Symbol::Nonterminal(nt)),
                    None => return Err(GrammarError::UndefinedSymbol(w.clone())),
                },
                Tok::Bare(w) if w.chars().count() == 1 => symbols.push(Symbol::Terminal(w.clone())),
                Tok::Bare(w) => {
                    return Err(syntax(
                        t.line,
                        t.column,
                        format!("`{w}` is neither a nonterminal nor a single-character terminal"),
                    ))
                }
                Tok::Prob(p) => {
                    if symbols.is_empty() {
                        return Err(syntax(t.line, t.column, "empty alternative"));
                    }
                    prods.push(Production {
                        symbols: std::mem::take(&mut symbols),
                        probability: *p,
                    });
                    expect_bar = true;
                }
                Tok::Bar => return Err(syntax(t.line, t.column, "missing probability before `|`")),
                Tok::Arrow => return Err(syntax(t.line, t.column, "unexpected `->`")),
            }
        }
        if !symbols.is_empty() || prods.is_empty() || !expect_bar {
            return Err(syntax(last_pos.0, last_pos.1, "alternative without probability"));
        }
        rules.push(prods);
    }

    for (nt, prods) in rules.iter_mut().enumerate() {
        let sum: f64 = prods.iter().map(|p| p.probability).sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(GrammarError::ProbabilitySum {
                nonterminal: names[nt].clone(),
                sum,
            });
        }
        if (sum - 1.0).abs() > 1e-12 {
            for p in prods.iter_mut() {
                p.probability /= sum;
            }
        }
    }

    Ok(Pcfg {
        names,
        rules,
        start: 0,
        source_hash: hex::encode(Sha256::digest(text.as_bytes())),
    })
}

fn is_nonterminal_name(w: &str) -> bool {
    w.chars().next().is_some_and(|c| c.is_ascii_uppercase())
        && w.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// The bundled expression grammar, parsed.
pub fn expr_grammar() -> Pcfg {
    parse_pcfg(EXPR_GRAMMAR).expect("bundled grammar is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rule_prob(g: &Pcfg, nt: &str, rhs: &[&str]) -> f64 {
        let id = g.nonterminal(nt).unwrap();
        g.rules(id)
            .iter()
            .find(|p| {
                p.symbols.len() == rhs.len()
                    && p.symbols.iter().zip(rhs).all(|(s, r)| match s {
                        Symbol::Terminal(t) => t == r,
                        Symbol::Nonterminal(n) => g.nonterminal_names()[*n] == *r,
                    })
            })
            .map(|p| p.probability)
            .unwrap()
    }

    #[test]
    fn bundled_grammar_rules() {
        let g = expr_grammar();
        assert_eq!(g.nonterminal_names()[g.start_symbol()], "S");
        assert_eq!(rule_prob(&g, "Number", &["Nonzero", "Digits"]), 0.9);
        assert_eq!(rule_prob(&g, "Number", &["Nonzero"]), 0.1);
        assert_eq!(rule_prob(&g, "Op", &["//"]), 0.2);
        assert_eq!(rule_prob(&g, "Digit", &["0"]), 0.1);
        assert_eq!(rule_prob(&g, "Expr", &["L", "Expr", "Op", "Expr", "R"]), 0.2);
        for nt in 0..g.nonterminal_names().len() {
            let s: f64 = g.rules(nt).iter().map(|p| p.probability).sum();
            assert!((s - 1.0).abs() < 1e-9, "{}", g.nonterminal_names()[nt]);
        }
        // 0.1111 x 9 is renormalized to exactly uniform
        assert!((rule_prob(&g, "Nonzero", &["7"]) - 1.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn single_rule_grammar() {
        let g = parse_pcfg("S -> '1' [1.0]").unwrap();
        assert_eq!(g.rules(0).len(), 1);
        assert_eq!(g.rules(0)[0].probability, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            assert_eq!(
                g.sample_derivation(DerivationBudget::default(), &mut rng),
                Derivation::Complete("1".into())
            );
        }
    }

    #[test]
    fn rejects_bad_sum() {
        let err = parse_pcfg("S -> 'a' [0.6] | 'b' [0.3]").unwrap_err();
        assert!(matches!(err, GrammarError::ProbabilitySum { ref nonterminal, .. } if nonterminal == "S"));
    }

    #[test]
    fn rejects_undefined_symbol() {
        assert_eq!(
            parse_pcfg("S -> A 'b' [1.0]").unwrap_err(),
            GrammarError::UndefinedSymbol("A".into())
        );
    }

    #[test]
    fn reports_syntax_position() {
        match parse_pcfg("S -> 'a' [1.0]\nA -> 'b' [0.5 | 'c' [0.5]").unwrap_err() {
            GrammarError::Syntax { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e:?}"),
        }
        match parse_pcfg("S -> 'a' 'b'").unwrap_err() {
            GrammarError::Syntax { line, column, .. } => assert_eq!((line, column), (1, 10)),
            e => panic!("unexpected {e:?}"),
        }
        assert!(matches!(parse_pcfg("S -> ab [1.0]"), Err(GrammarError::Syntax { .. })));
        assert!(matches!(parse_pcfg("x -> 'a' [1.0]"), Err(GrammarError::Syntax { .. })));
        assert_eq!(
            parse_pcfg("S -> 'a' [1.0]\nS -> 'b' [1.0]").unwrap_err(),
            GrammarError::DuplicateNonterminal("S".into())
        );
    }

    #[test]
    fn comments_and_continuations() {
        let g = parse_pcfg("# c\nS -> A [0.5] |  # trailing\n  'z' [0.5]\nA -> 'a' [1]\n").unwrap();
        assert_eq!(g.rules(0).len(), 2);
        assert_eq!(g.terminals(), vec!["a", "z"]);
    }

    #[test]
    fn display_reparses() {
        let g = expr_grammar();
        let again = parse_pcfg(&g.to_string()).unwrap();
        assert_eq!(g.rules, again.rules);
    }

    #[test]
    fn deterministic_given_seed() {
        let g = expr_grammar();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| g.sample_derivation(DerivationBudget::default(), &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn budget_is_enforced() {
        let g = parse_pcfg("S -> 'a' S [0.9] | 'b' [0.1]").unwrap();
        let budget = DerivationBudget::new(4, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            if let Derivation::Complete(s) = g.sample_derivation(budget, &mut rng) {
                assert!(s.len() <= 4);
            }
        }
        assert!(DerivationBudget::new(0, 3).is_none());
    }

    #[test]
    fn samples_use_expression_alphabet() {
        let g = expr_grammar();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            if let Derivation::Complete(s) = g.sample_derivation(DerivationBudget::default(), &mut rng) {
                assert!(s.chars().all(|c| "0123456789+-*/()".contains(c)), "{s}");
                assert!(s.len() <= 64);
            }
        }
    }
}
