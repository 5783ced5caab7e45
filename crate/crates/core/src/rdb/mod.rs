//! In-memory relational database: typed tables, integer primary keys,
//! foreign keys and optional row timestamps.

mod bundle;
mod canonical;
mod task;

pub use bundle::{ingest_bundle, load_bundle_unchecked, parse_timestamp, write_bundle};
pub use canonical::canonical_form;
pub use task::{load_task, write_task, LabelRecord, Split, SplitCuts, TaskSpec, TaskType};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RdbError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("table {table}: CSV header {found:?} does not match schema columns {expected:?}")]
    ColumnMismatch {
        table: String,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("table {table}, row {row}: expected {expected} cells, found {found}")]
    RowLength {
        table: String,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("table {table}, row {row}, column {column}: cannot parse {value:?} as {kind}")]
    Parse {
        table: String,
        row: usize,
        column: String,
        value: String,
        kind: ColumnKind,
    },
    #[error("table {table}, row {row}, column {column}: null in non-nullable column")]
    NullValue {
        table: String,
        row: usize,
        column: String,
    },
    #[error("table {table}, row {row}: duplicate primary key {key}")]
    DuplicateKey { table: String, row: usize, key: i64 },
    #[error("table {}, row {}, column {}: foreign key {} has no row in {}", .0.table, .0.row, .0.column, .0.value, .0.references)]
    DanglingForeignKey(FdViolation),
    #[error("invalid task: {0}")]
    Task(String),
}

pub type Result<T> = std::result::Result<T, RdbError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Integer,
    Real,
    Categorical,
    Datetime,
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnKind::Integer => "integer",
            ColumnKind::Real => "real",
            ColumnKind::Categorical => "categorical",
            ColumnKind::Datetime => "datetime",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default)]
    pub nullable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKeySpec {
    pub column: String,
    pub references: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSpec {
    pub name: String,
    pub columns: Vec<ColumnSpec>,
    pub primary_key: String,
    #[serde(default)]
    pub foreign_keys: Vec<ForeignKeySpec>,
    #[serde(default)]
    pub time_column: Option<String>,
}

impl TableSpec {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }
}

/// Contents of `schema.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub tables: Vec<TableSpec>,
}

impl Schema {
    pub fn table(&self, name: &str) -> Option<&TableSpec> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Structural checks: unique names, key and time columns present with
    /// the right kinds, referenced tables declared.
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for t in &self.tables {
            if !names.insert(t.name.as_str()) {
                return Err(RdbError::Schema(format!("duplicate table {}", t.name)));
            }
        }
        for t in &self.tables {
            let mut cols = HashSet::new();
            for c in &t.columns {
                if !cols.insert(c.name.as_str()) {
                    return Err(RdbError::Schema(format!(
                        "table {}: duplicate column {}",
                        t.name, c.name
                    )));
                }
            }
            let pk = t.column_index(&t.primary_key).ok_or_else(|| {
                RdbError::Schema(format!(
                    "table {}: primary key {} is not a column",
                    t.name, t.primary_key
                ))
            })?;
            if t.columns[pk].kind != ColumnKind::Integer {
                return Err(RdbError::Schema(format!(
                    "table {}: primary key {} must be an integer column",
                    t.name, t.primary_key
                )));
            }
            let mut fk_cols = HashSet::new();
            for fk in &t.foreign_keys {
                let idx = t.column_index(&fk.column).ok_or_else(|| {
                    RdbError::Schema(format!(
                        "table {}: foreign key column {} is not a column",
                        t.name, fk.column
                    ))
                })?;
                if t.columns[idx].kind != ColumnKind::Integer {
                    return Err(RdbError::Schema(format!(
                        "table {}: foreign key column {} must be an integer column",
                        t.name, fk.column
                    )));
                }
                if idx == pk {
                    return Err(RdbError::Schema(format!(
                        "table {}: primary key {} cannot also be a foreign key",
                        t.name, fk.column
                    )));
                }
                if !fk_cols.insert(fk.column.as_str()) {
                    return Err(RdbError::Schema(format!(
                        "table {}: column {} declared as foreign key twice",
                        t.name, fk.column
                    )));
                }
                if !names.contains(fk.references.as_str()) {
                    return Err(RdbError::Schema(format!(
                        "table {}: foreign key {} references unknown table {}",
                        t.name, fk.column, fk.references
                    )));
                }
            }
            if let Some(tc) = &t.time_column {
                let idx = t.column_index(tc).ok_or_else(|| {
                    RdbError::Schema(format!("table {}: time column {tc} is not a column", t.name))
                })?;
                if t.columns[idx].kind != ColumnKind::Datetime {
                    return Err(RdbError::Schema(format!(
                        "table {}: time column {tc} must be a datetime column",
                        t.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One stored cell. Categorical cells hold a vocabulary id (`>= 1`);
/// datetimes are epoch seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Null,
    Int(i64),
    Real(f64),
    Cat(u32),
    Time(i64),
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn as_i64(&self) -> Option<i64> {
        match *self {
            Value::Int(v) | Value::Time(v) => Some(v),
            _ => None,
        }
    }

    /// Numeric reading of integer, real and datetime cells.
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Int(v) | Value::Time(v) => Some(v as f64),
            Value::Real(v) => Some(v),
            _ => None,
        }
    }
}

/// Category strings of one column. Id 0 is reserved for unseen values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub const UNK: u32 = 0;

    pub fn intern(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        self.words.push(word.to_string());
        let id = self.words.len() as u32;
        self.index.insert(word.to_string(), id);
        id
    }

    /// Id of `word`, or [`Vocab::UNK`].
    pub fn lookup(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(Self::UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        if id == 0 {
            return None;
        }
        self.words.get(id as usize - 1).map(String::as_str)
    }

    /// Number of ids including the reserved one.
    pub fn size(&self) -> usize {
        self.words.len() + 1
    }
}

#[derive(Debug, Clone)]
pub struct Table {
    spec: TableSpec,
    pk_col: usize,
    time_col: Option<usize>,
    fk_cols: Vec<usize>,
    vocabs: Vec<Option<Vocab>>,
    rows: Vec<Vec<Value>>,
    pk_index: HashMap<i64, usize>,
}

impl Table {
    /// Empty table for a spec that already passed [`Schema::validate`].
    pub fn new(spec: TableSpec) -> Self {
        let pk_col = spec.column_index(&spec.primary_key).expect("validated pk");
        let time_col = spec
            .time_column
            .as_deref()
            .map(|c| spec.column_index(c).expect("validated time column"));
        let fk_cols = spec
            .foreign_keys
            .iter()
            .map(|fk| spec.column_index(&fk.column).expect("validated fk"))
            .collect();
        let vocabs = spec
            .columns
            .iter()
            .map(|c| (c.kind == ColumnKind::Categorical).then(Vocab::default))
            .collect();
        Self {
            spec,
            pk_col,
            time_col,
            fk_cols,
            vocabs,
            rows: Vec::new(),
            pk_index: HashMap::new(),
        }
    }

    /// Same spec and vocabularies, no rows.
    pub fn empty_like(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            pk_col: self.pk_col,
            time_col: self.time_col,
            fk_cols: self.fk_cols.clone(),
            vocabs: self.vocabs.clone(),
            rows: Vec::new(),
            pk_index: HashMap::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn spec(&self) -> &TableSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[Value] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<Value>] {
        &self.rows
    }

    pub fn pk_column(&self) -> usize {
        self.pk_col
    }

    pub fn time_column(&self) -> Option<usize> {
        self.time_col
    }

    /// Column index of the `k`-th declared foreign key.
    pub fn fk_column(&self, k: usize) -> usize {
        self.fk_cols[k]
    }

    pub fn fk_columns(&self) -> &[usize] {
        &self.fk_cols
    }

    pub fn vocab(&self, col: usize) -> Option<&Vocab> {
        self.vocabs[col].as_ref()
    }

    pub fn pk(&self, i: usize) -> i64 {
        self.rows[i][self.pk_col]
            .as_i64()
            .expect("primary keys are non-null integers")
    }

    pub fn timestamp(&self, i: usize) -> Option<i64> {
        self.time_col.and_then(|c| self.rows[i][c].as_i64())
    }

    /// Value of the `k`-th foreign key of row `i` (`None` when null).
    pub fn fk_value(&self, i: usize, k: usize) -> Option<i64> {
        self.rows[i][self.fk_cols[k]].as_i64()
    }

    pub fn row_of(&self, pk: i64) -> Option<usize> {
        self.pk_index.get(&pk).copied()
    }

    /// Parses raw cells (CSV text) into a typed row and appends it.
    /// `row` is the 0-based data row index used in error reports.
    pub fn push_raw(&mut self, row: usize, cells: &[&str]) -> Result<()> {
        if cells.len() != self.spec.columns.len() {
            return Err(RdbError::RowLength {
                table: self.spec.name.clone(),
                row,
                expected: self.spec.columns.len(),
                found: cells.len(),
            });
        }
        let mut values = Vec::with_capacity(cells.len());
        for (c, raw) in cells.iter().enumerate() {
            let col = &self.spec.columns[c];
            let v = if raw.is_empty() {
                Value::Null
            } else {
                let parsed = match col.kind {
                    ColumnKind::Integer => raw.trim().parse().ok().map(Value::Int),
                    ColumnKind::Real => raw.trim().parse().ok().map(Value::Real),
                    ColumnKind::Datetime => parse_timestamp(raw).map(Value::Time),
                    ColumnKind::Categorical => {
                        let vocab = self.vocabs[c].as_mut().expect("categorical vocab");
                        Some(Value::Cat(vocab.intern(raw)))
                    }
                };
                parsed.ok_or_else(|| RdbError::Parse {
                    table: self.spec.name.clone(),
                    row,
                    column: col.name.clone(),
                    value: raw.to_string(),
                    kind: col.kind,
                })?
            };
            if v.is_null() && (!col.nullable || c == self.pk_col) {
                return Err(RdbError::NullValue {
                    table: self.spec.name.clone(),
                    row,
                    column: col.name.clone(),
                });
            }
            values.push(v);
        }
        self.push_row(row, values)
    }

    /// Appends an already typed row. Categorical ids must come from this
    /// table's vocabularies.
    pub fn push_row(&mut self, row: usize, values: Vec<Value>) -> Result<()> {
        let key = values[self.pk_col].as_i64().ok_or_else(|| RdbError::NullValue {
            table: self.spec.name.clone(),
            row,
            column: self.spec.primary_key.clone(),
        })?;
        if self.pk_index.insert(key, self.rows.len()).is_some() {
            return Err(RdbError::DuplicateKey {
                table: self.spec.name.clone(),
                row,
                key,
            });
        }
        self.rows.push(values);
        Ok(())
    }

    /// Overwrites a single cell, keeping the key index in sync.
    pub fn set_value(&mut self, row: usize, col: usize, value: Value) {
        if col == self.pk_col {
            let old = self.pk(row);
            self.pk_index.remove(&old);
            if let Some(k) = value.as_i64() {
                self.pk_index.insert(k, row);
            }
        }
        self.rows[row][col] = value;
    }

    /// Swaps two rows of the store (not a logical change).
    pub fn swap_rows(&mut self, a: usize, b: usize) {
        self.rows.swap(a, b);
        let (ka, kb) = (self.pk(a), self.pk(b));
        self.pk_index.insert(ka, a);
        self.pk_index.insert(kb, b);
    }

    /// Renders one cell the way the CSV exporter writes it.
    pub fn render_cell(&self, col: usize, v: &Value) -> String {
        match *v {
            Value::Null => String::new(),
            Value::Int(x) | Value::Time(x) => x.to_string(),
            Value::Real(x) => x.to_string(),
            Value::Cat(id) => self.vocabs[col]
                .as_ref()
                .and_then(|voc| voc.word(id))
                .unwrap_or("")
                .to_string(),
        }
    }
}

/// A foreign-key value with no matching primary key (a broken entity-level
/// functional dependency).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FdViolation {
    pub table: String,
    pub row: usize,
    pub column: String,
    pub value: i64,
    pub references: String,
}

#[derive(Debug, Clone)]
pub struct RelationalDatabase {
    tables: BTreeMap<String, Table>,
}

impl RelationalDatabase {
    /// Builds a database from raw text rows without checking foreign keys.
    pub fn from_raw_unchecked(
        schema: &Schema,
        rows: &BTreeMap<String, Vec<Vec<String>>>,
    ) -> Result<Self> {
        schema.validate()?;
        let mut tables = BTreeMap::new();
        for spec in &schema.tables {
            let mut table = Table::new(spec.clone());
            if let Some(raw) = rows.get(&spec.name) {
                for (i, r) in raw.iter().enumerate() {
                    let cells: Vec<&str> = r.iter().map(String::as_str).collect();
                    table.push_raw(i, &cells)?;
                }
            }
            tables.insert(spec.name.clone(), table);
        }
        Ok(Self { tables })
    }

    /// As [`RelationalDatabase::from_raw_unchecked`], then rejects the first
    /// dangling foreign key.
    pub fn from_raw(schema: &Schema, rows: &BTreeMap<String, Vec<Vec<String>>>) -> Result<Self> {
        let db = Self::from_raw_unchecked(schema, rows)?;
        db.check_integrity()?;
        Ok(db)
    }

    pub fn from_tables(tables: Vec<Table>) -> Result<Self> {
        let schema = Schema {
            tables: tables.iter().map(|t| t.spec.clone()).collect(),
        };
        schema.validate()?;
        Ok(Self {
            tables: tables.into_iter().map(|t| (t.spec.name.clone(), t)).collect(),
        })
    }

    pub fn check_integrity(&self) -> Result<()> {
        match validate_fd(self).into_iter().next() {
            Some(v) => Err(RdbError::DanglingForeignKey(v)),
            None => Ok(()),
        }
    }

    pub fn schema(&self) -> Schema {
        Schema {
            tables: self.tables.values().map(|t| t.spec.clone()).collect(),
        }
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.get(name)
    }

    pub fn table_mut(&mut self, name: &str) -> Option<&mut Table> {
        self.tables.get_mut(name)
    }

    /// Tables in name order.
    pub fn tables(&self) -> impl Iterator<Item = &Table> {
        self.tables.values()
    }

    pub fn table_names(&self) -> impl Iterator<Item = &str> {
        self.tables.keys().map(String::as_str)
    }

    pub fn total_rows(&self) -> usize {
        self.tables.values().map(Table::len).sum()
    }
}

/// One report per foreign-key cell whose value resolves to no row of the
/// referenced table. Null foreign keys are not violations.
pub fn validate_fd(db: &RelationalDatabase) -> Vec<FdViolation> {
    let mut out = Vec::new();
    for table in db.tables() {
        for (k, fk) in table.spec.foreign_keys.iter().enumerate() {
            let Some(target) = db.table(&fk.references) else {
                continue;
            };
            for i in 0..table.len() {
                if let Some(v) = table.fk_value(i, k) {
                    if target.row_of(v).is_none() {
                        out.push(FdViolation {
                            table: table.name().to_string(),
                            row: i,
                            column: fk.column.clone(),
                            value: v,
                            references: fk.references.clone(),
                        });
                    }
                }
            }
        }
    }
    out
}
