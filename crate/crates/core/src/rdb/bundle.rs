//! Dataset bundles on disk: `schema.json` plus one `<table>.csv` per table.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};

use super::{RdbError, RelationalDatabase, Result, Schema};

/// Epoch seconds from a raw integer or an ISO-8601 date / datetime.
pub fn parse_timestamp(raw: &str) -> Option<i64> {
    let raw = raw.trim();
    if let Ok(v) = raw.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(RdbError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|source| RdbError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| RdbError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a CSV file into its header and string records.
pub(crate) fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    if !path.exists() {
        return Err(RdbError::MissingFile(path.to_path_buf()));
    }
    let csv_err = |source| RdbError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let header = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

fn read_tables(dir: &Path) -> Result<(Schema, BTreeMap<String, Vec<Vec<String>>>)> {
    let schema: Schema = read_json(&dir.join("schema.json"))?;
    schema.validate()?;
    let mut rows = BTreeMap::new();
    for spec in &schema.tables {
        let (header, records) = read_csv(&dir.join(format!("{}.csv", spec.name)))?;
        let expected: Vec<String> = spec.columns.iter().map(|c| c.name.clone()).collect();
        if header != expected {
            return Err(RdbError::ColumnMismatch {
                table: spec.name.clone(),
                expected,
                found: header,
            });
        }
        rows.insert(spec.name.clone(), records);
    }
    Ok((schema, rows))
}

/// Reads and validates a bundle, rejecting dangling foreign keys.
pub fn ingest_bundle(dir: impl AsRef<Path>) -> Result<RelationalDatabase> {
    let (schema, rows) = read_tables(dir.as_ref())?;
    RelationalDatabase::from_raw(&schema, &rows)
}

/// Reads a bundle with type and key checks but without foreign-key
/// resolution, so that violations can be listed with `validate_fd`.
pub fn load_bundle_unchecked(dir: impl AsRef<Path>) -> Result<RelationalDatabase> {
    let (schema, rows) = read_tables(dir.as_ref())?;
    RelationalDatabase::from_raw_unchecked(&schema, &rows)
}

/// Writes `schema.json` and one CSV per table. Datetimes are written as
/// epoch seconds and reals in shortest round-trip form.
pub fn write_bundle(dir: impl AsRef<Path>, db: &RelationalDatabase) -> Result<()> {
    let dir = dir.as_ref();
    let io = |source| RdbError::Io {
        path: dir.to_path_buf(),
        source,
    };
    fs::create_dir_all(dir).map_err(io)?;
    let schema_path = dir.join("schema.json");
    let json = serde_json::to_string_pretty(&db.schema()).map_err(|source| RdbError::Json {
        path: schema_path.clone(),
        source,
    })?;
    fs::write(&schema_path, json).map_err(|source| RdbError::Io {
        path: schema_path.clone(),
        source,
    })?;
    for table in db.tables() {
        let path = dir.join(format!("{}.csv", table.name()));
        let csv_err = |source| RdbError::Csv {
            path: path.clone(),
            source,
        };
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(table.spec().columns.iter().map(|c| c.name.as_str()))
            .map_err(csv_err)?;
        for row in table.rows() {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, v)| table.render_cell(c, v))
                .collect();
            w.write_record(&cells).map_err(csv_err)?;
        }
        w.flush().map_err(|source| RdbError::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok(())
}
