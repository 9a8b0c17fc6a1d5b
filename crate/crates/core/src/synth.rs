//! Small templated corpus for smoke runs and the overfit check.
//!
//! Questions name the select column, use a fixed cue for the aggregate
//! ("how many", "highest", "lowest", "total", "average") and for each
//! operator ("is", "more than", "less than"), and quote every condition value
//! verbatim, so each slot is recoverable from the question text alone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{parse_table_record, Example, SchemaStore, TableRecord, TableStore};
use crate::sketch::{render_number, Aggregate, Operator, SqlQuery};

struct DemoTable {
    id: &'static str,
    header: &'static [&'static str],
    numeric: &'static [bool],
    rows: &'static [&'static [&'static str]],
}

const TABLES: &[DemoTable] = &[
    DemoTable {
        id: "1-10015132-11",
        header: &[
            "Player",
            "No.",
            "Nationality",
            "Position",
            "Years in Toronto",
            "School/Club Team",
        ],
        numeric: &[false, true, false, false, false, false],
        rows: &[
            &[
                "Aleksandar Radojević",
                "25",
                "Serbia",
                "Center",
                "1999-2000",
                "Barton CC (KS)",
            ],
            &[
                "Shawn Respert",
                "31",
                "United States",
                "Guard",
                "1997-98",
                "Michigan State",
            ],
            &[
                "Quentin Richardson",
                "N/A",
                "United States",
                "Forward",
                "2013-present",
                "DePaul",
            ],
            &[
                "Alvin Robertson",
                "7, 21",
                "United States",
                "Guard",
                "1995-96",
                "Arkansas",
            ],
            &[
                "Carlos Rogers",
                "33, 34",
                "United States",
                "Forward-Center",
                "1995-98",
                "Tennessee State",
            ],
            &["Roy Rogers", "9", "United States", "Forward", "1998", "Alabama"],
            &[
                "Jalen Rose",
                "5",
                "United States",
                "Guard-Forward",
                "2003-06",
                "Michigan",
            ],
            &[
                "Terrence Ross",
                "31",
                "United States",
                "Guard",
                "2012-present",
                "Washington",
            ],
            &[
                "Marcus Camby",
                "21",
                "United States",
                "Center",
                "1996-98",
                "Massachusetts",
            ],
            &["Jamal Magloire", "13", "Canada", "Center", "2010-11", "Kentucky"],
        ],
    },
    DemoTable {
        id: "demo-cities",
        header: &["City", "Country", "Population", "Area"],
        numeric: &[false, false, true, true],
        rows: &[
            &["Lyon", "France", "513000", "47"],
            &["Nice", "France", "342000", "71"],
            &["Porto", "Portugal", "232000", "41"],
            &["Braga", "Portugal", "193000", "183"],
            &["Graz", "Austria", "291000", "127"],
            &["Linz", "Austria", "206000", "95"],
        ],
    },
    DemoTable {
        id: "demo-films",
        header: &["Film", "Director", "Year", "Gross"],
        numeric: &[false, false, true, true],
        rows: &[
            &["Arrival", "Villeneuve", "2016", "203"],
            &["Sicario", "Villeneuve", "2015", "84"],
            &["Heat", "Mann", "1995", "187"],
            &["Collateral", "Mann", "2004", "220"],
            &["Memento", "Nolan", "2000", "40"],
            &["Inception", "Nolan", "2010", "836"],
        ],
    },
];

fn agg_cue(agg: Aggregate) -> &'static str {
    match agg {
        Aggregate::None => "what is the",
        Aggregate::Max => "what is the highest",
        Aggregate::Min => "what is the lowest",
        Aggregate::Count => "how many",
        Aggregate::Sum => "what is the total",
        Aggregate::Avg => "what is the average",
    }
}

fn op_cue(op: Operator) -> &'static str {
    match op {
        Operator::Eq => "is",
        Operator::Gt => "is more than",
        Operator::Lt => "is less than",
    }
}

fn cell(t: &DemoTable, r: usize, c: usize) -> &'static str {
    t.rows[r][c]
}

fn is_number(s: &str) -> bool {
    s.parse::<f64>().is_ok()
}

/// Table records of the demo corpus, rows included.
pub fn demo_tables() -> Vec<TableRecord> {
    TABLES
        .iter()
        .map(|t| TableRecord {
            id: t.id.to_string(),
            header: t.header.iter().map(|h| h.to_string()).collect(),
            types: t
                .numeric
                .iter()
                .map(|&n| if n { "real" } else { "text" }.to_string())
                .collect(),
            rows: t
                .rows
                .iter()
                .map(|row| {
                    row.iter()
                        .zip(t.numeric)
                        .map(|(v, &n)| match (n, v.parse::<f64>()) {
                            (true, Ok(x)) => serde_json::json!(x),
                            _ => serde_json::json!(v),
                        })
                        .collect()
                })
                .collect(),
        })
        .collect()
}

/// The demo tables loaded as they would be from disk.
pub fn demo_table_store() -> TableStore {
    let mut store = TableStore::new();
    for (i, rec) in demo_tables().iter().enumerate() {
        let line = serde_json::to_string(rec).expect("records serialize");
        let (schema, rows) = parse_table_record(i + 1, &line).expect("demo tables are valid");
        store.insert(schema, rows);
    }
    store
}

pub fn demo_schemas() -> SchemaStore {
    demo_table_store()
        .schemas()
        .map(|s| (s.table_id.clone(), s.clone()))
        .collect()
}

fn one_example(rng: &mut ChaCha8Rng) -> Example {
    let t = &TABLES[rng.gen_range(0..TABLES.len())];
    let n = t.header.len();
    let numeric_cols: Vec<usize> = (0..n).filter(|&c| t.numeric[c]).collect();

    let agg = Aggregate::ALL[rng.gen_range(0..Aggregate::ALL.len())];
    let sel = match agg {
        Aggregate::Max | Aggregate::Min | Aggregate::Sum | Aggregate::Avg => {
            *numeric_cols.choose(rng).expect("numeric column")
        }
        _ => rng.gen_range(0..n),
    };
    let mut question = format!("{} {}", agg_cue(agg), t.header[sel].to_lowercase());
    let mut gold = SqlQuery::new(agg, sel);

    let wn = rng.gen_range(0..=2usize);
    let mut cols: Vec<usize> = (0..n).filter(|&c| c != sel).collect();
    cols.shuffle(rng);
    let row = rng.gen_range(0..t.rows.len());
    for (k, &col) in cols.iter().take(wn).enumerate() {
        let v = cell(t, row, col);
        let op = if t.numeric[col] && is_number(v) {
            Operator::ALL[rng.gen_range(0..3)]
        } else {
            Operator::Eq
        };
        let value = match op {
            Operator::Eq => v.to_string(),
            Operator::Gt => render_number(v.parse::<f64>().expect("numeric") - 1.0),
            Operator::Lt => render_number(v.parse::<f64>().expect("numeric") + 1.0),
        };
        question.push_str(if k == 0 { " when " } else { " and " });
        question.push_str(&format!("{} {} {}", t.header[col].to_lowercase(), op_cue(op), value));
        gold = gold.with_cond(col, op, value);
    }
    question.push('?');
    Example::new(question, t.id, gold)
}

/// `n` distinct questions over [`demo_tables`], deterministic in `seed`.
pub fn demo_examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Example> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        assert!(
            attempts < 100 * (n + 10),
            "demo templates cannot produce {n} distinct questions"
        );
        let ex = one_example(&mut rng);
        if !out.iter().any(|e| e.id == ex.id) {
            out.push(ex);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::{execute, ExecResult};
    use crate::tokenize::{find_value_span, tokenize};

    #[test]
    fn deterministic_and_distinct() {
        let a = demo_examples(40, 7);
        assert_eq!(a, demo_examples(40, 7));
        assert_ne!(a, demo_examples(40, 8));
        let mut ids: Vec<&str> = a.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 40);
    }

    #[test]
    fn every_value_is_a_question_span_and_queries_run() {
        let store = demo_table_store();
        assert_eq!(store.len(), 3);
        for ex in demo_examples(64, 3) {
            let toks = tokenize(&ex.question);
            for c in &ex.gold.conds {
                assert!(
                    find_value_span(&toks, &c.value).is_some(),
                    "{} / {}",
                    ex.question,
                    c.value
                );
            }
            let (schema, rows) = store.get(&ex.table_id).unwrap();
            ex.gold.check_against(schema.len()).unwrap();
            if ex.gold.conds.iter().all(|c| c.op == Operator::Eq) && ex.gold.agg == Aggregate::Count {
                assert_ne!(execute(&ex.gold, rows), ExecResult::Scalar(0.0), "{}", ex.question);
            }
        }
    }
}
