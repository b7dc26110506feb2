//! Condition expressions.
//!
//! ```text
//! expr       := term (OR term)*
//! term       := factor (AND factor)*
//! factor     := NOT factor | '(' expr ')' | comparison | empty '(' path [',' duration] ')'
//! comparison := metric '(' path ',' kind [',' agg duration] ')' op number
//!             | light '(' path ')' is (on | off)
//! op         := > | >= | < | <= | = | == | != | ≥ | ≤ | ≠
//! duration   := number (s | m | h)
//! ```
//!
//! Paths are resolved against the rule's target when a rule is compiled; the
//! canonical text form of a condition always carries full paths.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{path_covers, ResourceNode, ResourceTree, SensorKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowAgg {
    Mean,
    Max,
    Min,
    Sum,
}

impl WindowAgg {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(WindowAgg::Mean),
            "max" => Some(WindowAgg::Max),
            "min" => Some(WindowAgg::Min),
            "sum" => Some(WindowAgg::Sum),
            _ => None,
        }
    }

    pub fn apply(self, values: &[f64]) -> Option<f64> {
        if values.is_empty() {
            return None;
        }
        Some(match self {
            WindowAgg::Sum => values.iter().copied().collect::<crate::store::CompensatedSum>().value(),
            WindowAgg::Mean => {
                values.iter().copied().collect::<crate::store::CompensatedSum>().value() / values.len() as f64
            }
            WindowAgg::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            WindowAgg::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
        })
    }
}

impl fmt::Display for WindowAgg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WindowAgg::Mean => "mean",
            WindowAgg::Max => "max",
            WindowAgg::Min => "min",
            WindowAgg::Sum => "sum",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Window {
    pub duration_s: u64,
    pub agg: WindowAgg,
}

/// A metric at a resource, optionally reduced over a trailing window.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MetricRef {
    pub path: String,
    pub kind: SensorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<Window>,
}

impl MetricRef {
    pub fn new(path: &str, kind: SensorKind) -> Self {
        MetricRef {
            path: path.to_string(),
            kind,
            window: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    Gt,
    Ge,
    Lt,
    Le,
    Eq,
    Ne,
}

impl CmpOp {
    pub fn apply(self, lhs: f64, rhs: f64) -> bool {
        match self {
            CmpOp::Gt => lhs > rhs,
            CmpOp::Ge => lhs >= rhs,
            CmpOp::Lt => lhs < rhs,
            CmpOp::Le => lhs <= rhs,
            CmpOp::Eq => lhs == rhs,
            CmpOp::Ne => lhs != rhs,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            ">" => CmpOp::Gt,
            ">=" | "≥" => CmpOp::Ge,
            "<" => CmpOp::Lt,
            "<=" | "≤" => CmpOp::Le,
            "=" | "==" => CmpOp::Eq,
            "!=" | "≠" => CmpOp::Ne,
            _ => return None,
        })
    }
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Compare {
        metric: MetricRef,
        op: CmpOp,
        literal: f64,
    },
    /// Room shows no occupancy or activity for the dwell time (engine default
    /// when `None`).
    Empty {
        path: String,
        dwell_s: Option<u64>,
    },
    And(Box<Condition>, Box<Condition>),
    Or(Box<Condition>, Box<Condition>),
    Not(Box<Condition>),
}

impl Condition {
    pub fn and(l: Condition, r: Condition) -> Self {
        Condition::And(Box::new(l), Box::new(r))
    }

    pub fn or(l: Condition, r: Condition) -> Self {
        Condition::Or(Box::new(l), Box::new(r))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(c: Condition) -> Self {
        Condition::Not(Box::new(c))
    }

    pub fn depth(&self) -> usize {
        match self {
            Condition::Compare { .. } | Condition::Empty { .. } => 1,
            Condition::Not(c) => 1 + c.depth(),
            Condition::And(l, r) | Condition::Or(l, r) => 1 + l.depth().max(r.depth()),
        }
    }

    /// Leaves in left-to-right order.
    pub fn leaves(&self) -> Vec<&Condition> {
        let mut out = Vec::new();
        fn walk<'a>(c: &'a Condition, out: &mut Vec<&'a Condition>) {
            match c {
                Condition::Compare { .. } | Condition::Empty { .. } => out.push(c),
                Condition::Not(x) => walk(x, out),
                Condition::And(l, r) | Condition::Or(l, r) => {
                    walk(l, out);
                    walk(r, out);
                }
            }
        }
        walk(self, &mut out);
        out
    }

    pub fn metrics(&self) -> Vec<&MetricRef> {
        self.leaves()
            .into_iter()
            .filter_map(|l| match l {
                Condition::Compare { metric, .. } => Some(metric),
                _ => None,
            })
            .collect()
    }

    fn map_paths<E>(&self, f: &mut impl FnMut(&str) -> Result<String, E>) -> Result<Condition, E> {
        Ok(match self {
            Condition::Compare { metric, op, literal } => Condition::Compare {
                metric: MetricRef {
                    path: f(&metric.path)?,
                    ..metric.clone()
                },
                op: *op,
                literal: *literal,
            },
            Condition::Empty { path, dwell_s } => Condition::Empty {
                path: f(path)?,
                dwell_s: *dwell_s,
            },
            Condition::And(l, r) => Condition::and(l.map_paths(f)?, r.map_paths(f)?),
            Condition::Or(l, r) => Condition::or(l.map_paths(f)?, r.map_paths(f)?),
            Condition::Not(c) => Condition::not(c.map_paths(f)?),
        })
    }

    /// Rewrites every path to its canonical form. A path may be absolute, or
    /// relative to the target or to one of its ancestors; it must land on the
    /// target, one of its ancestors, or somewhere below it.
    pub fn resolve(&self, tree: &ResourceTree, target: &ResourceNode) -> Result<Condition, ConditionError> {
        let target_path = tree.canonical_path(target);
        self.map_paths(&mut |p: &str| {
            let p = p.trim_matches('/');
            let mut candidates: Vec<String> = tree
                .ancestry(target)
                .map(|a| format!("{}/{p}", tree.canonical_path(a)))
                .collect();
            let first = p.split('/').next().unwrap_or_default();
            for anc in tree.ancestry(target) {
                if anc.name == first {
                    let base = tree.parent(anc).map(|n| tree.canonical_path(n));
                    candidates.push(match base {
                        Some(b) => format!("{b}/{p}"),
                        None => p.to_string(),
                    });
                }
            }
            candidates.push(p.to_string());
            let node = candidates
                .iter()
                .find_map(|c| tree.resolve_path(c).ok())
                .ok_or_else(|| ConditionError::UnknownPath(p.to_string()))?;
            let resolved = tree.canonical_path(node);
            if path_covers(&resolved, &target_path) || path_covers(&target_path, &resolved) {
                Ok(resolved)
            } else {
                Err(ConditionError::OutOfScope {
                    path: resolved,
                    target: target_path.clone(),
                })
            }
        })
    }
}

fn fmt_duration(f: &mut fmt::Formatter<'_>, secs: u64) -> fmt::Result {
    if secs.is_multiple_of(3600) {
        write!(f, "{}h", secs / 3600)
    } else if secs.is_multiple_of(60) {
        write!(f, "{}m", secs / 60)
    } else {
        write!(f, "{secs}s")
    }
}

/// Canonical text. Binary operators are parenthesized whenever the child
/// binds looser than its parent, so `parse(c.to_string()) == c`.
impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn prec(c: &Condition) -> u8 {
            match c {
                Condition::Or(..) => 0,
                Condition::And(..) => 1,
                _ => 2,
            }
        }
        fn child(f: &mut fmt::Formatter<'_>, c: &Condition, min: u8) -> fmt::Result {
            if prec(c) < min {
                write!(f, "({c})")
            } else {
                write!(f, "{c}")
            }
        }
        match self {
            Condition::Compare { metric, op, literal } => {
                if metric.kind == SensorKind::LightState
                    && metric.window.is_none()
                    && *op == CmpOp::Eq
                    && (*literal == 0.0 || *literal == 1.0)
                {
                    let state = if *literal == 1.0 { "on" } else { "off" };
                    return write!(f, "light({}) is {state}", metric.path);
                }
                write!(f, "metric({}, {}", metric.path, metric.kind)?;
                if let Some(w) = metric.window {
                    write!(f, ", {} ", w.agg)?;
                    fmt_duration(f, w.duration_s)?;
                }
                write!(f, ") {op} {literal:?}")
            }
            Condition::Empty { path, dwell_s } => {
                write!(f, "empty({path}")?;
                if let Some(d) = dwell_s {
                    f.write_str(", ")?;
                    fmt_duration(f, *d)?;
                }
                f.write_str(")")
            }
            // Left-associative chains: the right operand needs parentheses at
            // equal precedence.
            Condition::Or(l, r) => {
                child(f, l, 0)?;
                f.write_str(" OR ")?;
                child(f, r, 1)
            }
            Condition::And(l, r) => {
                child(f, l, 1)?;
                f.write_str(" AND ")?;
                child(f, r, 2)
            }
            Condition::Not(c) => {
                f.write_str("NOT ")?;
                child(f, c, 2)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConditionError {
    /// `token` is 1-based; `offset` is the character offset in the text.
    #[error("syntax error at token {token} (offset {offset}): {message}")]
    SyntaxError {
        token: usize,
        offset: usize,
        message: String,
    },
    #[error("unknown sensor kind `{kind}` at token {token}")]
    UnknownKind { kind: String, token: usize },
    #[error("unknown resource path `{0}`")]
    UnknownPath(String),
    #[error("path `{path}` is neither above nor below rule target `{target}`")]
    OutOfScope { path: String, target: String },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Op(CmpOp),
    LParen,
    RParen,
    Comma,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    offset: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | '/' | '+')
}

fn lex(text: &str) -> Result<Vec<Token>, ConditionError> {
    let chars: Vec<(usize, char)> = text.chars().enumerate().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let single = match c {
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            '≥' => Some(Tok::Op(CmpOp::Ge)),
            '≤' => Some(Tok::Op(CmpOp::Le)),
            '≠' => Some(Tok::Op(CmpOp::Ne)),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Token { tok, offset: pos });
            i += 1;
            continue;
        }
        if matches!(c, '>' | '<' | '=' | '!') {
            let next = chars.get(i + 1).map(|&(_, n)| n);
            let two: String = [Some(c), next].into_iter().flatten().collect();
            if let Some(op) = CmpOp::parse(&two).filter(|_| next == Some('=')) {
                out.push(Token {
                    tok: Tok::Op(op),
                    offset: pos,
                });
                i += 2;
                continue;
            }
            match CmpOp::parse(&c.to_string()) {
                Some(op) => {
                    out.push(Token {
                        tok: Tok::Op(op),
                        offset: pos,
                    });
                    i += 1;
                    continue;
                }
                None => {
                    return Err(ConditionError::SyntaxError {
                        token: out.len() + 1,
                        offset: pos,
                        message: format!("unexpected character `{c}`"),
                    })
                }
            }
        }
        if is_word_char(c) {
            let start = i;
            while i < chars.len() && is_word_char(chars[i].1) {
                i += 1;
            }
            let word: String = chars[start..i].iter().map(|&(_, c)| c).collect();
            out.push(Token {
                tok: Tok::Word(word),
                offset: pos,
            });
            continue;
        }
        return Err(ConditionError::SyntaxError {
            token: out.len() + 1,
            offset: pos,
            message: format!("unexpected character `{c}`"),
        });
    }
    Ok(out)
}

pub const MAX_NESTING: usize = 64;

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    end_offset: usize,
    nesting: usize,
}

impl Parser {
    fn error(&self, message: impl Into<String>) -> ConditionError {
        ConditionError::SyntaxError {
            token: self.pos + 1,
            offset: self.toks.get(self.pos).map(|t| t.offset).unwrap_or(self.end_offset),
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn peek_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Word(w)) if w.eq_ignore_ascii_case(kw))
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ConditionError> {
        if self.peek() == Some(&want) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected {what}")))
        }
    }

    fn word(&mut self, what: &str) -> Result<String, ConditionError> {
        match self.peek() {
            Some(Tok::Word(w)) if !is_reserved(w) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            _ => Err(self.error(format!("expected {what}"))),
        }
    }

    fn expr(&mut self) -> Result<Condition, ConditionError> {
        let mut left = self.term()?;
        while self.peek_keyword("or") {
            self.pos += 1;
            let right = self.term()?;
            left = Condition::or(left, right);
        }
        Ok(left)
    }

    fn term(&mut self) -> Result<Condition, ConditionError> {
        let mut left = self.factor()?;
        while self.peek_keyword("and") {
            self.pos += 1;
            let right = self.factor()?;
            left = Condition::and(left, right);
        }
        Ok(left)
    }

    fn factor(&mut self) -> Result<Condition, ConditionError> {
        self.nesting += 1;
        if self.nesting > MAX_NESTING {
            return Err(self.error("expression nested too deeply"));
        }
        let out = self.factor_inner();
        self.nesting -= 1;
        out
    }

    fn factor_inner(&mut self) -> Result<Condition, ConditionError> {
        match self.peek() {
            Some(Tok::LParen) => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Some(Tok::Word(w)) => match w.to_ascii_lowercase().as_str() {
                "not" => {
                    self.pos += 1;
                    Ok(Condition::not(self.factor()?))
                }
                "empty" => {
                    self.pos += 1;
                    self.expect(Tok::LParen, "`(` after empty")?;
                    let path = self.word("a resource path")?;
                    let mut dwell_s = None;
                    if self.peek() == Some(&Tok::Comma) {
                        self.pos += 1;
                        dwell_s = Some(self.duration()?);
                    }
                    self.expect(Tok::RParen, "`)`")?;
                    Ok(Condition::Empty { path, dwell_s })
                }
                "light" => {
                    self.pos += 1;
                    self.expect(Tok::LParen, "`(` after light")?;
                    let path = self.word("a resource path")?;
                    self.expect(Tok::RParen, "`)`")?;
                    if !self.peek_keyword("is") {
                        return Err(self.error("expected `is on` or `is off`"));
                    }
                    self.pos += 1;
                    let literal = if self.peek_keyword("on") {
                        1.0
                    } else if self.peek_keyword("off") {
                        0.0
                    } else {
                        return Err(self.error("expected `on` or `off`"));
                    };
                    self.pos += 1;
                    Ok(Condition::Compare {
                        metric: MetricRef::new(&path, SensorKind::LightState),
                        op: CmpOp::Eq,
                        literal,
                    })
                }
                "metric" => {
                    self.pos += 1;
                    self.expect(Tok::LParen, "`(` after metric")?;
                    let path = self.word("a resource path")?;
                    self.expect(Tok::Comma, "`,`")?;
                    let kind_tok = self.pos + 1;
                    let kind_name = self.word("a sensor kind")?;
                    let kind = kind_name
                        .parse::<SensorKind>()
                        .map_err(|_| ConditionError::UnknownKind {
                            kind: kind_name.clone(),
                            token: kind_tok,
                        })?;
                    let mut window = None;
                    if self.peek() == Some(&Tok::Comma) {
                        self.pos += 1;
                        let agg_name = self.word("a window aggregate (mean|max|min|sum)")?;
                        let agg = WindowAgg::parse(&agg_name.to_ascii_lowercase()).ok_or_else(|| {
                            self.pos -= 1;
                            self.error("expected a window aggregate (mean|max|min|sum)")
                        })?;
                        let duration_s = self.duration()?;
                        window = Some(Window { duration_s, agg });
                    }
                    self.expect(Tok::RParen, "`)`")?;
                    let op = match self.peek() {
                        Some(Tok::Op(op)) => *op,
                        _ => return Err(self.error("expected a comparison operator")),
                    };
                    self.pos += 1;
                    let literal = self.number()?;
                    Ok(Condition::Compare {
                        metric: MetricRef { path, kind, window },
                        op,
                        literal,
                    })
                }
                _ => Err(self.error(format!("unexpected `{w}`"))),
            },
            Some(_) => Err(self.error("expected a condition")),
            None => Err(self.error("unexpected end of condition")),
        }
    }

    fn number(&mut self) -> Result<f64, ConditionError> {
        match self.peek() {
            Some(Tok::Word(w)) => match w.parse::<f64>() {
                Ok(v) if v.is_finite() => {
                    self.pos += 1;
                    Ok(v)
                }
                _ => Err(self.error(format!("expected a number, found `{w}`"))),
            },
            _ => Err(self.error("expected a number")),
        }
    }

    fn duration(&mut self) -> Result<u64, ConditionError> {
        let bad = |p: &Parser| p.error("expected a duration such as 900s, 15m or 1h");
        let Some(Tok::Word(w)) = self.peek() else {
            return Err(bad(self));
        };
        let (digits, unit) = w.split_at(w.len().saturating_sub(1));
        let scale = match unit {
            "s" => 1,
            "m" => 60,
            "h" => 3600,
            _ => return Err(bad(self)),
        };
        let n: u64 = digits.parse().map_err(|_| bad(self))?;
        let secs = n.checked_mul(scale).filter(|&s| s > 0).ok_or_else(|| bad(self))?;
        self.pos += 1;
        Ok(secs)
    }
}

fn is_reserved(w: &str) -> bool {
    ["and", "or", "not"].iter().any(|k| w.eq_ignore_ascii_case(k))
}

/// Parses condition text. Paths are kept as written; see [`Condition::resolve`].
pub fn parse_condition(text: &str) -> Result<Condition, ConditionError> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end_offset: text.chars().count(),
        nesting: 0,
    };
    if p.toks.is_empty() {
        return Err(p.error("empty condition"));
    }
    let cond = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(cond)
}
