//! Query execution over held table rows and the accuracy metrics.
//!
//! This is the only module that can read cell values: [`TableRows`] keeps its
//! cells private here, so feature extraction and the model cannot see them.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, TableStore};
use crate::sketch::{
    canonical_value, logical_form_equal_with, parse_numeral, render_number, Aggregate, Operator, SqlQuery, ValueMode,
};
use crate::tokenize::{find_value_span, tokenize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Text(String),
    Number(f64),
}

impl Cell {
    fn canonical(&self, mode: ValueMode) -> String {
        match (self, mode) {
            (Cell::Text(s), _) => canonical_value(s, mode),
            (Cell::Number(v), _) => render_number(*v),
        }
    }

    fn numeric(&self) -> Option<f64> {
        match self {
            Cell::Text(s) => parse_numeral(s),
            Cell::Number(v) => Some(*v),
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Number(v)
    }
}

/// Cell data for one table.
#[derive(Debug, Clone, Default)]
pub struct TableRows {
    table_id: String,
    rows: Vec<Vec<Cell>>,
}

impl TableRows {
    pub fn new(table_id: &str, n_cols: usize, rows: Vec<Vec<Cell>>) -> Result<Self, String> {
        if let Some(i) = rows.iter().position(|r| r.len() != n_cols) {
            return Err(format!("row {i} has {} cells, expected {n_cols}", rows[i].len()));
        }
        Ok(Self {
            table_id: table_id.to_string(),
            rows,
        })
    }

    pub fn table_id(&self) -> &str {
        &self.table_id
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExecResult {
    /// Selected cells of the matching rows (order is not significant).
    Values(Vec<Cell>),
    Scalar(f64),
    /// Aggregate over nothing (SQL NULL).
    Empty,
}

fn condition_holds(cell: &Cell, op: Operator, value: &str, mode: ValueMode) -> bool {
    match op {
        Operator::Eq => cell.canonical(mode) == canonical_value(value, mode),
        Operator::Gt | Operator::Lt => match (cell.numeric(), parse_numeral(value)) {
            (Some(a), Some(b)) => {
                if op == Operator::Gt {
                    a > b
                } else {
                    a < b
                }
            }
            _ => false,
        },
    }
}

pub fn execute(query: &SqlQuery, rows: &TableRows) -> ExecResult {
    execute_with(query, rows, ValueMode::Normalized)
}

/// Runs `query` over `rows`. Panics if a column index exceeds the row width.
pub fn execute_with(query: &SqlQuery, rows: &TableRows, mode: ValueMode) -> ExecResult {
    let matching = rows.rows.iter().filter(|row| {
        query
            .conds
            .iter()
            .all(|c| condition_holds(&row[c.col], c.op, &c.value, mode))
    });
    let selected = matching.map(|row| &row[query.sel]);
    match query.agg {
        Aggregate::None => ExecResult::Values(selected.cloned().collect()),
        Aggregate::Count => ExecResult::Scalar(selected.count() as f64),
        agg => {
            let nums: Vec<f64> = selected.filter_map(Cell::numeric).collect();
            if nums.is_empty() {
                return ExecResult::Empty;
            }
            let v = match agg {
                Aggregate::Max => nums.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Aggregate::Min => nums.iter().copied().fold(f64::INFINITY, f64::min),
                Aggregate::Sum => nums.iter().sum(),
                Aggregate::Avg => nums.iter().sum::<f64>() / nums.len() as f64,
                Aggregate::None | Aggregate::Count => unreachable!(),
            };
            ExecResult::Scalar(v)
        }
    }
}

pub const SCALAR_TOLERANCE: f64 = 1e-6;

pub fn execution_equal(a: &ExecResult, b: &ExecResult) -> bool {
    execution_equal_with(a, b, ValueMode::Normalized)
}

pub fn execution_equal_with(a: &ExecResult, b: &ExecResult, mode: ValueMode) -> bool {
    match (a, b) {
        (ExecResult::Values(x), ExecResult::Values(y)) => {
            let mut x: Vec<String> = x.iter().map(|c| c.canonical(mode)).collect();
            let mut y: Vec<String> = y.iter().map(|c| c.canonical(mode)).collect();
            x.sort();
            y.sort();
            x == y
        }
        (ExecResult::Scalar(x), ExecResult::Scalar(y)) => (x - y).abs() <= SCALAR_TOLERANCE,
        (ExecResult::Empty, ExecResult::Empty) => true,
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SubtaskAccuracy {
    pub sa: f64,
    pub sc: f64,
    pub wn: f64,
    pub wc: f64,
    pub wo: f64,
    /// Canonical value strings per matched column.
    pub wv: f64,
    /// Question token span per matched column.
    pub wv_span: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub value_mode: ValueMode,
    pub evaluated: usize,
    /// Examples whose table was not available for execution.
    pub skipped: usize,
    pub acc_lf: f64,
    pub acc_ex: f64,
    pub subtask: SubtaskAccuracy,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}: {v}");
        };
        kv("label", self.label.clone());
        kv("value_mode", self.value_mode.to_string());
        kv("evaluated", self.evaluated.to_string());
        kv("skipped", self.skipped.to_string());
        kv("acc_lf", format!("{:.4}", self.acc_lf));
        kv("acc_ex", format!("{:.4}", self.acc_ex));
        kv("acc_sa", format!("{:.4}", self.subtask.sa));
        kv("acc_sc", format!("{:.4}", self.subtask.sc));
        kv("acc_wn", format!("{:.4}", self.subtask.wn));
        kv("acc_wc", format!("{:.4}", self.subtask.wc));
        kv("acc_wo", format!("{:.4}", self.subtask.wo));
        kv("acc_wv", format!("{:.4}", self.subtask.wv));
        kv("acc_wv_span", format!("{:.4}", self.subtask.wv_span));
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        writeln!(
            f,
            "{} ({} examples, values {})",
            self.label, self.evaluated, self.value_mode
        )?;
        writeln!(f, "+------------------+--------+")?;
        writeln!(f, "| Acc_lf           | {:>6} |", pct(self.acc_lf))?;
        writeln!(f, "| Acc_ex           | {:>6} |", pct(self.acc_ex))?;
        writeln!(f, "+------------------+--------+")?;
        for (name, v) in [
            ("Select Aggregate", self.subtask.sa),
            ("Select Column", self.subtask.sc),
            ("Where Number", self.subtask.wn),
            ("Where Column", self.subtask.wc),
            ("Where Operator", self.subtask.wo),
            ("Where Value", self.subtask.wv),
            ("Where Value span", self.subtask.wv_span),
        ] {
            writeln!(f, "| {name:<16} | {:>6} |", pct(v))?;
        }
        write!(f, "+------------------+--------+")
    }
}

fn column_set(q: &SqlQuery) -> Vec<usize> {
    let mut cols: Vec<usize> = q.conds.iter().map(|c| c.col).collect();
    cols.sort_unstable();
    cols.dedup();
    cols
}

fn multiset<T: Ord>(mut v: Vec<T>) -> Vec<T> {
    v.sort();
    v
}

/// Per-example subtask hits: `[sa, sc, wn, wc, wo, wv, wv_span]`.
pub fn subtask_hits(pred: &SqlQuery, gold: &SqlQuery, question: &str, mode: ValueMode) -> [bool; 7] {
    let wc = column_set(pred) == column_set(gold);
    let ops = |q: &SqlQuery| multiset(q.conds.iter().map(|c| (c.col, c.op)).collect());
    let vals = |q: &SqlQuery| {
        multiset(
            q.conds
                .iter()
                .map(|c| (c.col, canonical_value(&c.value, mode)))
                .collect(),
        )
    };
    let tokens = tokenize(question);
    let spans = |q: &SqlQuery| {
        q.conds
            .iter()
            .map(|c| (c.col, find_value_span(&tokens, &c.value)))
            .collect::<Vec<_>>()
    };
    let gold_spans = spans(gold);
    let wv_span = gold_spans.iter().all(|(_, s)| s.is_some()) && multiset(gold_spans) == multiset(spans(pred));
    [
        pred.agg == gold.agg,
        pred.sel == gold.sel,
        pred.conds.len() == gold.conds.len(),
        wc,
        ops(pred) == ops(gold),
        vals(pred) == vals(gold),
        wv_span,
    ]
}

/// Scores predictions aligned 1:1 with `examples`. Panics on a length mismatch.
pub fn evaluate(
    predictions: &[SqlQuery],
    examples: &[Example],
    tables: &TableStore,
    mode: ValueMode,
    label: &str,
) -> EvalReport {
    assert_eq!(
        predictions.len(),
        examples.len(),
        "predictions and examples must be aligned"
    );
    let mut counts = [0usize; 7];
    let mut lf = 0usize;
    let mut ex = 0usize;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for (pred, example) in predictions.iter().zip(examples) {
        let Some(rows) = tables.rows(&example.table_id) else {
            skipped += 1;
            continue;
        };
        evaluated += 1;
        if logical_form_equal_with(pred, &example.gold, mode) {
            lf += 1;
        }
        let gold_res = execute_with(&example.gold, rows, mode);
        let pred_res = execute_with(pred, rows, mode);
        if execution_equal_with(&gold_res, &pred_res, mode) {
            ex += 1;
        }
        for (c, hit) in counts
            .iter_mut()
            .zip(subtask_hits(pred, &example.gold, &example.question, mode))
        {
            *c += usize::from(hit);
        }
    }
    let frac = |n: usize| {
        if evaluated == 0 {
            0.0
        } else {
            n as f64 / evaluated as f64
        }
    };
    EvalReport {
        label: label.to_string(),
        value_mode: mode,
        evaluated,
        skipped,
        acc_lf: frac(lf),
        acc_ex: frac(ex),
        subtask: SubtaskAccuracy {
            sa: frac(counts[0]),
            sc: frac(counts[1]),
            wn: frac(counts[2]),
            wc: frac(counts[3]),
            wo: frac(counts[4]),
            wv: frac(counts[5]),
            wv_span: frac(counts[6]),
        },
    }
}

/// Most frequent class per slot, as a reference point for trained models.
pub fn majority_baseline(train: &[Example]) -> (Aggregate, usize) {
    let mut aggs: BTreeMap<Aggregate, usize> = BTreeMap::new();
    let mut wns: BTreeMap<usize, usize> = BTreeMap::new();
    for e in train {
        *aggs.entry(e.gold.agg).or_default() += 1;
        *wns.entry(e.gold.conds.len()).or_default() += 1;
    }
    let agg = aggs
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map_or(Aggregate::None, |(k, _)| *k);
    let wn = wns
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map_or(0, |(k, _)| *k);
    (agg, wn)
}
