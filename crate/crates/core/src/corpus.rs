//! Line-delimited dataset ingestion (tables and annotated questions) and the
//! table-disjoint evaluation split.
//!
//! Tables use the dataset's `{"id", "header", "types", "rows"}` records and
//! examples its `{"question", "table_id", "sql": {"sel", "agg", "conds"}}`
//! records. Row data is handed straight to [`TableRows`], whose cells only the
//! evaluator can read.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::IgnoredAny;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
pub use crate::evaluate::{Cell, TableRows};
use crate::sketch::{render_number, Aggregate, Condition, Operator, SqlQuery, MAX_CONDITIONS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Text,
    Real,
}

impl ColumnType {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "text" => Some(ColumnType::Text),
            "real" => Some(ColumnType::Real),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ColumnType::Text => "text",
            ColumnType::Real => "real",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub table_id: String,
    pub headers: Vec<String>,
    pub col_types: Vec<ColumnType>,
}

impl TableSchema {
    pub fn new(
        table_id: impl Into<String>,
        headers: Vec<String>,
        col_types: Vec<ColumnType>,
    ) -> std::result::Result<Self, String> {
        if headers.is_empty() {
            return Err("table has no headers".into());
        }
        if headers.len() != col_types.len() {
            return Err(format!("{} headers but {} types", headers.len(), col_types.len()));
        }
        if let Some(i) = headers.iter().position(|h| h.trim().is_empty()) {
            return Err(format!("header {i} is blank"));
        }
        Ok(Self {
            table_id: table_id.into(),
            headers,
            col_types,
        })
    }

    pub fn len(&self) -> usize {
        self.headers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.headers.is_empty()
    }
}

/// One record of a tables file, as it appears on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableRecord {
    pub id: String,
    pub header: Vec<String>,
    pub types: Vec<String>,
    #[serde(default)]
    pub rows: Vec<Vec<serde_json::Value>>,
}

#[derive(Deserialize)]
struct SchemaOnlyRecord {
    id: String,
    header: Vec<String>,
    types: Vec<String>,
    #[serde(default)]
    #[allow(dead_code)]
    rows: IgnoredAny,
}

#[derive(Debug, Clone, Default)]
pub struct TableStore {
    tables: BTreeMap<String, (TableSchema, TableRows)>,
}

impl TableStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, schema: TableSchema, rows: TableRows) -> bool {
        if self.tables.contains_key(&schema.table_id) {
            return false;
        }
        self.tables.insert(schema.table_id.clone(), (schema, rows));
        true
    }

    pub fn schema(&self, table_id: &str) -> Option<&TableSchema> {
        self.tables.get(table_id).map(|(s, _)| s)
    }

    pub fn rows(&self, table_id: &str) -> Option<&TableRows> {
        self.tables.get(table_id).map(|(_, r)| r)
    }

    pub fn get(&self, table_id: &str) -> Option<(&TableSchema, &TableRows)> {
        self.tables.get(table_id).map(|(s, r)| (s, r))
    }

    pub fn contains(&self, table_id: &str) -> bool {
        self.tables.contains_key(table_id)
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn schemas(&self) -> impl Iterator<Item = &TableSchema> {
        self.tables.values().map(|(s, _)| s)
    }
}

/// Schemas only; cell data is never materialized.
pub type SchemaStore = BTreeMap<String, TableSchema>;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn for_each_record(path: &Path, mut f: impl FnMut(usize, &str) -> Result<()>) -> Result<()> {
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        f(i + 1, &line)?;
    }
    Ok(())
}

fn schema_from_parts(line: usize, id: &str, header: Vec<String>, types: &[String]) -> Result<TableSchema> {
    let schema_err = |message: String| Error::Schema {
        line,
        table_id: id.to_string(),
        message,
    };
    let col_types = types
        .iter()
        .map(|t| ColumnType::parse(t).ok_or_else(|| schema_err(format!("unknown column type `{t}`"))))
        .collect::<Result<Vec<_>>>()?;
    TableSchema::new(id, header, col_types).map_err(schema_err)
}

fn cell_from_json(v: &serde_json::Value) -> std::result::Result<Cell, String> {
    match v {
        serde_json::Value::String(s) => Ok(Cell::Text(s.clone())),
        serde_json::Value::Number(n) => n
            .as_f64()
            .map(Cell::Number)
            .ok_or_else(|| format!("unrepresentable number {n}")),
        other => Err(format!("unsupported cell value {other}")),
    }
}

pub fn parse_table_record(line: usize, text: &str) -> Result<(TableSchema, TableRows)> {
    let rec: TableRecord = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    let schema = schema_from_parts(line, &rec.id, rec.header, &rec.types)?;
    let schema_err = |message: String| Error::Schema {
        line,
        table_id: rec.id.clone(),
        message,
    };
    let mut rows = Vec::with_capacity(rec.rows.len());
    for (r, row) in rec.rows.iter().enumerate() {
        if row.len() != schema.len() {
            return Err(schema_err(format!(
                "row {r} has {} cells, expected {}",
                row.len(),
                schema.len()
            )));
        }
        rows.push(
            row.iter()
                .map(cell_from_json)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|m| schema_err(format!("row {r}: {m}")))?,
        );
    }
    let rows = TableRows::new(&rec.id, schema.len(), rows).map_err(schema_err)?;
    Ok((schema, rows))
}

pub fn load_tables(path: impl AsRef<Path>) -> Result<TableStore> {
    let mut store = TableStore::new();
    for_each_record(path.as_ref(), |line, text| {
        let (schema, rows) = parse_table_record(line, text)?;
        let id = schema.table_id.clone();
        if !store.insert(schema, rows) {
            return Err(Error::DuplicateTable { line, table_id: id });
        }
        Ok(())
    })?;
    Ok(store)
}

/// Reads only `id`, `header` and `types` from a tables file.
pub fn load_schemas(path: impl AsRef<Path>) -> Result<SchemaStore> {
    let mut out = SchemaStore::new();
    for_each_record(path.as_ref(), |line, text| {
        let rec: SchemaOnlyRecord = serde_json::from_str(text).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let schema = schema_from_parts(line, &rec.id, rec.header, &rec.types)?;
        if out.contains_key(&schema.table_id) {
            return Err(Error::DuplicateTable {
                line,
                table_id: schema.table_id,
            });
        }
        out.insert(schema.table_id.clone(), schema);
        Ok(())
    })?;
    Ok(out)
}

pub fn write_tables(path: impl AsRef<Path>, records: &[TableRecord]) -> Result<()> {
    write_lines(path.as_ref(), records)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    /// Content hash of table id and question; keys precomputed embeddings.
    pub id: String,
    pub question: String,
    pub table_id: String,
    pub gold: SqlQuery,
}

impl Example {
    pub fn new(question: impl Into<String>, table_id: impl Into<String>, gold: SqlQuery) -> Self {
        let question = question.into();
        let table_id = table_id.into();
        Self {
            id: example_id(&table_id, &question),
            question,
            table_id,
            gold,
        }
    }
}

pub fn example_id(table_id: &str, question: &str) -> String {
    let mut h = Sha256::new();
    h.update(table_id.as_bytes());
    h.update([0x1f]);
    h.update(question.as_bytes());
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct SqlRecord {
    sel: i64,
    agg: i64,
    conds: Vec<(i64, i64, serde_json::Value)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExampleRecord {
    question: String,
    table_id: String,
    sql: SqlRecord,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadStats {
    pub loaded: usize,
    pub skipped_unknown_table: usize,
    /// Largest condition count seen in the file.
    pub max_conds: usize,
    /// `cond_histogram[k]` = examples with `k` conditions.
    pub cond_histogram: [usize; MAX_CONDITIONS + 1],
}

#[derive(Debug, Clone, Default)]
pub struct LoadedExamples {
    pub examples: Vec<Example>,
    pub stats: LoadStats,
}

fn cond_value(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => n.as_f64().map(render_number),
        _ => None,
    }
}

fn parse_example(line: usize, text: &str, n_headers: impl Fn(&str) -> Option<usize>) -> Result<Option<Example>> {
    let rec: ExampleRecord = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    let Some(n) = n_headers(&rec.table_id) else {
        return Ok(None);
    };
    let bad = |message: String| Error::Annotation { line, message };
    let agg =
        Aggregate::from_id(rec.sql.agg).ok_or_else(|| bad(format!("aggregate code {} outside [0,5]", rec.sql.agg)))?;
    let sel = usize::try_from(rec.sql.sel).map_err(|_| bad(format!("negative select column {}", rec.sql.sel)))?;
    let mut gold = SqlQuery::new(agg, sel);
    for (col, op, value) in &rec.sql.conds {
        let op = Operator::from_id(*op).ok_or_else(|| bad(format!("operator code {op} outside [0,2]")))?;
        let col = usize::try_from(*col).map_err(|_| bad(format!("negative condition column {col}")))?;
        let value = cond_value(value).ok_or_else(|| bad(format!("unsupported condition value {value}")))?;
        gold.conds.push(Condition { col, op, value });
    }
    gold.check_against(n).map_err(bad)?;
    Ok(Some(Example::new(rec.question, rec.table_id, gold)))
}

/// Loads annotated questions, skipping (and counting) those whose table is
/// not in `tables`.
pub fn load_examples(path: impl AsRef<Path>, tables: &TableStore) -> Result<LoadedExamples> {
    load_examples_with(path, |id| tables.schema(id).map(TableSchema::len))
}

pub fn load_examples_for_schemas(path: impl AsRef<Path>, schemas: &SchemaStore) -> Result<LoadedExamples> {
    load_examples_with(path, |id| schemas.get(id).map(TableSchema::len))
}

fn load_examples_with(path: impl AsRef<Path>, n_headers: impl Fn(&str) -> Option<usize>) -> Result<LoadedExamples> {
    let mut out = LoadedExamples::default();
    for_each_record(path.as_ref(), |line, text| {
        match parse_example(line, text, &n_headers)? {
            Some(ex) => {
                let k = ex.gold.conds.len();
                out.stats.max_conds = out.stats.max_conds.max(k);
                out.stats.cond_histogram[k] += 1;
                out.stats.loaded += 1;
                out.examples.push(ex);
            }
            None => out.stats.skipped_unknown_table += 1,
        }
        Ok(())
    })?;
    Ok(out)
}

fn example_record(ex: &Example) -> ExampleRecord {
    ExampleRecord {
        question: ex.question.clone(),
        table_id: ex.table_id.clone(),
        sql: SqlRecord {
            sel: ex.gold.sel as i64,
            agg: ex.gold.agg.id() as i64,
            conds: ex
                .gold
                .conds
                .iter()
                .map(|c| {
                    (
                        c.col as i64,
                        c.op.id() as i64,
                        serde_json::Value::String(c.value.clone()),
                    )
                })
                .collect(),
        },
    }
}

pub fn write_examples(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let records: Vec<_> = examples.iter().map(example_record).collect();
    write_lines(path.as_ref(), &records)
}

fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Test examples whose table never occurs in `train`, in their original order.
pub fn build_zero_shot_split(train: &[Example], test: &[Example]) -> Vec<Example> {
    let seen: BTreeSet<&str> = train.iter().map(|e| e.table_id.as_str()).collect();
    test.iter()
        .filter(|e| !seen.contains(e.table_id.as_str()))
        .cloned()
        .collect()
}

/// Query- and table-level counts for a split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub retained_queries: usize,
    pub dropped_queries: usize,
    pub retained_tables: usize,
    pub dropped_tables: usize,
}

pub fn split_counts(test: &[Example], retained: &[Example]) -> SplitCounts {
    let all: BTreeSet<&str> = test.iter().map(|e| e.table_id.as_str()).collect();
    let kept: BTreeSet<&str> = retained.iter().map(|e| e.table_id.as_str()).collect();
    SplitCounts {
        retained_queries: retained.len(),
        dropped_queries: test.len() - retained.len(),
        retained_tables: kept.len(),
        dropped_tables: all.len() - kept.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file_with(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    const T1: &str = r#"{"id":"t1","header":["a","b"],"types":["text","real"],"rows":[["x",1]]}"#;

    #[test]
    fn loads_one_table() {
        let f = file_with(&[T1]);
        let store = load_tables(f.path()).unwrap();
        assert_eq!(store.len(), 1);
        let (schema, rows) = store.get("t1").unwrap();
        assert_eq!(schema.headers, ["a", "b"]);
        assert_eq!(schema.col_types, [ColumnType::Text, ColumnType::Real]);
        assert_eq!(rows.len(), 1);
    }

    #[test]
    fn dataset_extra_fields_are_ignored() {
        let line = r#"{"id":"1-10007452-3","header":["Order Year","Manufacturer"],"page_title":"x","types":["text","text"],"rows":[["1992-93","Gillig"]],"name":"table_10007452_3","caption":null}"#;
        let f = file_with(&[line]);
        assert_eq!(load_tables(f.path()).unwrap().len(), 1);
        assert_eq!(load_schemas(f.path()).unwrap()["1-10007452-3"].headers.len(), 2);
    }

    #[test]
    fn empty_file_gives_empty_store() {
        let f = file_with(&[]);
        assert!(load_tables(f.path()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = file_with(&[T1, T1]);
        assert!(matches!(
            load_tables(f.path()),
            Err(Error::DuplicateTable { line: 2, .. })
        ));
    }

    #[test]
    fn schema_errors() {
        let f = file_with(&[r#"{"id":"t","header":["a"],"types":["text","real"],"rows":[]}"#]);
        assert!(matches!(load_tables(f.path()), Err(Error::Schema { .. })));
        let f = file_with(&[r#"{"id":"t","header":["a"],"types":["date"],"rows":[]}"#]);
        assert!(matches!(load_tables(f.path()), Err(Error::Schema { .. })));
        let f = file_with(&[r#"{"id":"t","header":["a"],"types":["text"],"rows":[["x","y"]]}"#]);
        assert!(matches!(load_tables(f.path()), Err(Error::Schema { .. })));
        let f = file_with(&[r#"{"id":"t","header":[" "],"types":["text"],"rows":[]}"#]);
        assert!(matches!(load_tables(f.path()), Err(Error::Schema { .. })));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = file_with(&[T1, "", "{not json"]);
        assert!(matches!(load_tables(f.path()), Err(Error::Parse { line: 3, .. })));
    }

    fn store() -> TableStore {
        load_tables(
            file_with(&[
                T1,
                r#"{"id":"t3","header":["a","b","c"],"types":["text","text","text"],"rows":[]}"#,
            ])
            .path(),
        )
        .unwrap()
    }

    #[test]
    fn loads_examples() {
        let f = file_with(&[
            r#"{"phase":1,"question":"q","table_id":"t1","sql":{"sel":0,"agg":0,"conds":[[1,0,"x"]]}}"#,
            r#"{"question":"r","table_id":"t1","sql":{"sel":1,"agg":3,"conds":[]}}"#,
            r#"{"question":"s","table_id":"t1","sql":{"sel":1,"agg":0,"conds":[[1,1,1998.0],[1,2,2.5]]}}"#,
            r#"{"question":"u","table_id":"missing","sql":{"sel":0,"agg":0,"conds":[]}}"#,
        ]);
        let loaded = load_examples(f.path(), &store()).unwrap();
        assert_eq!(loaded.stats.loaded, 3);
        assert_eq!(loaded.stats.skipped_unknown_table, 1);
        assert_eq!(loaded.stats.max_conds, 2);
        assert_eq!(loaded.stats.cond_histogram, [1, 1, 1, 0, 0]);
        let ex = &loaded.examples;
        assert_eq!(
            ex[0].gold.conds,
            [Condition {
                col: 1,
                op: Operator::Eq,
                value: "x".into()
            }]
        );
        assert!(ex[1].gold.conds.is_empty());
        assert_eq!(ex[1].gold.agg, Aggregate::Count);
        assert_eq!(ex[2].gold.conds[0].value, "1998");
        assert_eq!(ex[2].gold.conds[1].value, "2.5");
    }

    #[test]
    fn annotation_errors() {
        for bad in [
            r#"{"question":"q","table_id":"t3","sql":{"sel":99,"agg":0,"conds":[]}}"#,
            r#"{"question":"q","table_id":"t3","sql":{"sel":0,"agg":6,"conds":[]}}"#,
            r#"{"question":"q","table_id":"t3","sql":{"sel":0,"agg":0,"conds":[[0,3,"x"]]}}"#,
            r#"{"question":"q","table_id":"t3","sql":{"sel":0,"agg":0,"conds":[[5,0,"x"]]}}"#,
            r#"{"question":"q","table_id":"t3","sql":{"sel":0,"agg":0,"conds":[[0,0,"a"],[0,0,"b"],[1,0,"c"],[1,0,"d"],[2,0,"e"]]}}"#,
        ] {
            let f = file_with(&[bad]);
            assert!(
                matches!(
                    load_examples(f.path(), &store()),
                    Err(Error::Annotation { line: 1, .. })
                ),
                "{bad}"
            );
        }
    }

    fn ex(table: &str, q: &str) -> Example {
        Example::new(q, table, SqlQuery::new(Aggregate::None, 0))
    }

    #[test]
    fn zero_shot_split_cases() {
        let train = vec![ex("t1", "a"), ex("t2", "b")];
        let test = vec![ex("t2", "c"), ex("t3", "d"), ex("t3", "e")];
        let split = build_zero_shot_split(&train, &test);
        assert_eq!(split, vec![ex("t3", "d"), ex("t3", "e")]);
        let counts = split_counts(&test, &split);
        assert_eq!(counts.dropped_queries, 1);
        assert_eq!((counts.retained_tables, counts.dropped_tables), (1, 1));

        let disjoint = vec![ex("t9", "z")];
        assert_eq!(build_zero_shot_split(&train, &disjoint), disjoint);
        assert!(build_zero_shot_split(&train, &train).is_empty());
    }

    #[test]
    fn example_ids_are_stable() {
        assert_eq!(ex("t1", "a").id, ex("t1", "a").id);
        assert_ne!(ex("t1", "a").id, ex("t2", "a").id);
        assert_eq!(ex("t1", "a").id.len(), 16);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn examples() -> impl Strategy<Value = Vec<Example>> {
            prop::collection::vec((0u8..8, "[a-z ]{0,12}"), 0..30)
                .prop_map(|v| v.into_iter().map(|(t, q)| ex(&format!("t{t}"), &q)).collect())
        }

        fn annotated() -> impl Strategy<Value = Example> {
            let cond = (0usize..3, 0usize..3, "[A-Za-z0-9 ',.\"-]{1,10}");
            (
                "[A-Za-z ?']{0,20}",
                0usize..6,
                0usize..3,
                prop::collection::vec(cond, 0..=4),
            )
                .prop_map(|(q, agg, sel, conds)| {
                    let mut gold = SqlQuery::new(Aggregate::ALL[agg], sel);
                    for (c, o, v) in conds {
                        gold = gold.with_cond(c, Operator::ALL[o], v);
                    }
                    Example::new(q, "t3", gold)
                })
        }

        proptest! {
            #[test]
            fn split_is_table_disjoint(train in examples(), test in examples()) {
                let out = build_zero_shot_split(&train, &test);
                let train_ids: BTreeSet<_> = train.iter().map(|e| e.table_id.clone()).collect();
                prop_assert!(out.iter().all(|e| !train_ids.contains(&e.table_id)));
                let expected: Vec<_> = test.iter().filter(|e| !train_ids.contains(&e.table_id)).cloned().collect();
                prop_assert_eq!(out, expected);
            }

            #[test]
            fn examples_round_trip(exs in prop::collection::vec(annotated(), 0..6)) {
                let f = tempfile::NamedTempFile::new().unwrap();
                write_examples(f.path(), &exs).unwrap();
                let back = load_examples(f.path(), &store()).unwrap();
                prop_assert_eq!(back.examples, exs);
            }
        }
    }
}
