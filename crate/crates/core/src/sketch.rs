//! The fixed query sketch `SELECT agg(col) FROM t WHERE c op v AND ...`,
//! its text rendering, and order-insensitive comparison.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::TableSchema;

pub const MAX_CONDITIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Aggregate {
    None,
    Max,
    Min,
    Count,
    Sum,
    Avg,
}

impl Aggregate {
    pub const ALL: [Aggregate; 6] = [
        Aggregate::None,
        Aggregate::Max,
        Aggregate::Min,
        Aggregate::Count,
        Aggregate::Sum,
        Aggregate::Avg,
    ];

    pub fn from_id(id: i64) -> Option<Self> {
        usize::try_from(id).ok().and_then(|i| Self::ALL.get(i).copied())
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Aggregate::None => "",
            Aggregate::Max => "MAX",
            Aggregate::Min => "MIN",
            Aggregate::Count => "COUNT",
            Aggregate::Sum => "SUM",
            Aggregate::Avg => "AVG",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Operator {
    Eq,
    Gt,
    Lt,
}

impl Operator {
    pub const ALL: [Operator; 3] = [Operator::Eq, Operator::Gt, Operator::Lt];

    /// Dataset code 3 (`OP`) is deliberately not accepted.
    pub fn from_id(id: i64) -> Option<Self> {
        usize::try_from(id).ok().and_then(|i| Self::ALL.get(i).copied())
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Operator::Eq => "=",
            Operator::Gt => ">",
            Operator::Lt => "<",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub col: usize,
    pub op: Operator,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlQuery {
    pub agg: Aggregate,
    pub sel: usize,
    pub conds: Vec<Condition>,
}

impl SqlQuery {
    pub fn new(agg: Aggregate, sel: usize) -> Self {
        Self {
            agg,
            sel,
            conds: Vec::new(),
        }
    }

    pub fn with_cond(mut self, col: usize, op: Operator, value: impl Into<String>) -> Self {
        self.conds.push(Condition {
            col,
            op,
            value: value.into(),
        });
        self
    }

    pub fn check_against(&self, n_headers: usize) -> Result<(), String> {
        if self.sel >= n_headers {
            return Err(format!(
                "select column {} out of range for {n_headers} headers",
                self.sel
            ));
        }
        if self.conds.len() > MAX_CONDITIONS {
            return Err(format!(
                "{} conditions exceed the maximum of {MAX_CONDITIONS}",
                self.conds.len()
            ));
        }
        for c in &self.conds {
            if c.col >= n_headers {
                return Err(format!(
                    "condition column {} out of range for {n_headers} headers",
                    c.col
                ));
            }
        }
        Ok(())
    }
}

/// How where-values are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ValueMode {
    /// Trim, case-fold, collapse whitespace, canonical numerals.
    #[default]
    Normalized,
    /// Exact string equality.
    Strict,
}

impl fmt::Display for ValueMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueMode::Normalized => "normalized",
            ValueMode::Strict => "strict",
        })
    }
}

fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

fn quote_literal(value: &str) -> String {
    format!("'{}'", value.replace('\'', "''"))
}

/// Renders the query as SQL text. Panics if a column index is out of range
/// for `schema`.
pub fn serialize(query: &SqlQuery, schema: &TableSchema) -> String {
    let col = |i: usize| {
        let name = schema.headers.get(i).unwrap_or_else(|| {
            panic!(
                "column {i} out of range for table `{}` with {} headers",
                schema.table_id,
                schema.headers.len()
            )
        });
        quote_ident(name)
    };
    let mut out = String::from("SELECT ");
    match query.agg {
        Aggregate::None => out.push_str(&col(query.sel)),
        agg => {
            out.push_str(agg.keyword());
            out.push('(');
            out.push_str(&col(query.sel));
            out.push(')');
        }
    }
    out.push_str(" FROM ");
    out.push_str(&schema.table_id);
    for (i, c) in query.conds.iter().enumerate() {
        out.push_str(if i == 0 { " WHERE " } else { " AND " });
        out.push_str(&col(c.col));
        out.push(' ');
        out.push_str(c.op.symbol());
        out.push(' ');
        out.push_str(&quote_literal(&c.value));
    }
    out
}

/// Parses a plain decimal numeral, allowing a sign and comma thousands
/// separators between digits. Exponents, `inf` and `nan` are not numerals.
pub fn parse_numeral(s: &str) -> Option<f64> {
    let s = s.trim();
    let body = s.strip_prefix(['+', '-']).unwrap_or(s);
    let chars: Vec<char> = body.chars().collect();
    if !chars.iter().any(char::is_ascii_digit) {
        return None;
    }
    let mut seen_dot = false;
    for (i, &c) in chars.iter().enumerate() {
        match c {
            '0'..='9' => {}
            '.' if !seen_dot => seen_dot = true,
            ',' if !seen_dot => {
                let digit_before = i > 0 && chars[i - 1].is_ascii_digit();
                let digit_after = chars.get(i + 1).is_some_and(char::is_ascii_digit);
                if !(digit_before && digit_after) {
                    return None;
                }
            }
            _ => return None,
        }
    }
    let cleaned: String = s.chars().filter(|&c| c != ',').collect();
    cleaned.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Shortest round-tripping decimal; integral values carry no fractional part.
pub fn render_number(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    format!("{v}")
}

pub fn canonical_value(value: &str, mode: ValueMode) -> String {
    match mode {
        ValueMode::Strict => value.to_string(),
        ValueMode::Normalized => match parse_numeral(value) {
            Some(v) => render_number(v),
            None => crate::tokenize::normalize_whitespace(&value.to_lowercase()),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CanonicalQuery {
    pub agg: Aggregate,
    pub sel: usize,
    /// Sorted, so equal multisets compare equal.
    pub conds: Vec<(usize, Operator, String)>,
    pub mode: ValueMode,
}

pub fn canonicalize(query: &SqlQuery, mode: ValueMode) -> CanonicalQuery {
    let mut conds: Vec<_> = query
        .conds
        .iter()
        .map(|c| (c.col, c.op, canonical_value(&c.value, mode)))
        .collect();
    conds.sort();
    CanonicalQuery {
        agg: query.agg,
        sel: query.sel,
        conds,
        mode,
    }
}

/// Order-insensitive sketch equality with normalized values.
pub fn logical_form_equal(a: &SqlQuery, b: &SqlQuery) -> bool {
    logical_form_equal_with(a, b, ValueMode::Normalized)
}

pub fn logical_form_equal_with(a: &SqlQuery, b: &SqlQuery, mode: ValueMode) -> bool {
    a.agg == b.agg && a.sel == b.sel && canonicalize(a, mode) == canonicalize(b, mode)
}
