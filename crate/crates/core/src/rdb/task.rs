//! Prediction tasks: `task.json` plus `task_<split>.csv` label files.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bundle::{read_csv, read_json};
use super::{parse_timestamp, RdbError, RelationalDatabase, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Classification,
    Regression,
    LinkPrediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Upper bounds (inclusive) of the prediction timestamps of each split.
/// Val records lie in `(train_end, val_end]`, test in `(val_end, test_end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCuts {
    pub train_end: i64,
    pub val_end: i64,
    pub test_end: i64,
}

impl SplitCuts {
    fn window(&self, split: Split) -> (i64, i64) {
        match split {
            Split::Train => (i64::MIN, self.train_end),
            Split::Val => (self.train_end.saturating_add(1), self.val_end),
            Split::Test => (self.val_end.saturating_add(1), self.test_end),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub entity: i64,
    pub target: Option<i64>,
    pub timestamp: i64,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TaskHeader {
    name: String,
    task_type: TaskType,
    entity_table: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_table: Option<String>,
    split: SplitCuts,
    #[serde(default = "default_k")]
    eval_k: usize,
}

fn default_k() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub task_type: TaskType,
    pub entity_table: String,
    pub target_table: Option<String>,
    pub split: SplitCuts,
    pub eval_k: usize,
    pub train: Vec<LabelRecord>,
    pub val: Vec<LabelRecord>,
    pub test: Vec<LabelRecord>,
}

impl TaskSpec {
    pub fn records(&self, split: Split) -> &[LabelRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Checks the task against the database it will run on.
    pub fn validate(&self, db: &RelationalDatabase) -> Result<()> {
        let err = |m: String| Err(RdbError::Task(m));
        let SplitCuts {
            train_end,
            val_end,
            test_end,
        } = self.split;
        if !(train_end < val_end && val_end < test_end) {
            return err(format!(
                "split cuts must be strictly increasing, got {train_end}, {val_end}, {test_end}"
            ));
        }
        let Some(entities) = db.table(&self.entity_table) else {
            return err(format!("unknown entity table {}", self.entity_table));
        };
        let targets = match (self.task_type, &self.target_table) {
            (TaskType::LinkPrediction, Some(t)) => match db.table(t) {
                Some(t) => Some(t),
                None => return err(format!("unknown target table {t}")),
            },
            (TaskType::LinkPrediction, None) => {
                return err("link prediction requires target_table".into())
            }
            _ => None,
        };
        if self.eval_k == 0 {
            return err("eval_k must be positive".into());
        }
        for split in Split::ALL {
            let (lo, hi) = self.split.window(split);
            for (i, r) in self.records(split).iter().enumerate() {
                if entities.row_of(r.entity).is_none() {
                    return err(format!("{split} record {i}: unknown entity {}", r.entity));
                }
                if let Some(t) = targets {
                    match r.target {
                        Some(k) if t.row_of(k).is_some() => {}
                        other => {
                            return err(format!("{split} record {i}: unknown target {other:?}"))
                        }
                    }
                }
                if r.timestamp < lo || r.timestamp > hi {
                    return err(format!(
                        "{split} record {i}: timestamp {} outside split window",
                        r.timestamp
                    ));
                }
                if self.task_type == TaskType::Classification && r.label != 0.0 && r.label != 1.0 {
                    return err(format!("{split} record {i}: classification label {}", r.label));
                }
                if !r.label.is_finite() {
                    return err(format!("{split} record {i}: non-finite label"));
                }
            }
        }
        Ok(())
    }
}

fn parse_records(path: &Path, link: bool) -> Result<Vec<LabelRecord>> {
    let (header, rows) = read_csv(path)?;
    let expected: Vec<&str> = if link {
        vec!["entity_id", "target_id", "timestamp", "label"]
    } else {
        vec!["entity_id", "timestamp", "label"]
    };
    if header != expected {
        return Err(RdbError::ColumnMismatch {
            table: path.display().to_string(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: header,
        });
    }
    let table = path.display().to_string();
    let bad = |row: usize, column: &str, value: &str, kind| RdbError::Parse {
        table: table.clone(),
        row,
        column: column.to_string(),
        value: value.to_string(),
        kind,
    };
    use super::ColumnKind::*;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            if r.len() != expected.len() {
                return Err(RdbError::RowLength {
                    table: table.clone(),
                    row: i,
                    expected: expected.len(),
                    found: r.len(),
                });
            }
            let entity = r[0].trim().parse().map_err(|_| bad(i, "entity_id", &r[0], Integer))?;
            let off = usize::from(link);
            let target = if link {
                Some(r[1].trim().parse().map_err(|_| bad(i, "target_id", &r[1], Integer))?)
            } else {
                None
            };
            let ts = &r[1 + off];
            let timestamp = parse_timestamp(ts).ok_or_else(|| bad(i, "timestamp", ts, Datetime))?;
            let lb = &r[2 + off];
            let label = lb.trim().parse().map_err(|_| bad(i, "label", lb, Real))?;
            Ok(LabelRecord {
                entity,
                target,
                timestamp,
                label,
            })
        })
        .collect()
}

/// Reads `task.json` and the three label files, validated against `db`.
pub fn load_task(dir: impl AsRef<Path>, db: &RelationalDatabase) -> Result<TaskSpec> {
    let dir = dir.as_ref();
    let header: TaskHeader = read_json(&dir.join("task.json"))?;
    let link = header.task_type == TaskType::LinkPrediction;
    let task = TaskSpec {
        train: parse_records(&dir.join("task_train.csv"), link)?,
        val: parse_records(&dir.join("task_val.csv"), link)?,
        test: parse_records(&dir.join("task_test.csv"), link)?,
        name: header.name,
        task_type: header.task_type,
        entity_table: header.entity_table,
        target_table: header.target_table,
        split: header.split,
        eval_k: header.eval_k,
    };
    task.validate(db)?;
    Ok(task)
}

pub fn write_task(dir: impl AsRef<Path>, task: &TaskSpec) -> Result<()> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| RdbError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let header = TaskHeader {
        name: task.name.clone(),
        task_type: task.task_type,
        entity_table: task.entity_table.clone(),
        target_table: task.target_table.clone(),
        split: task.split,
        eval_k: task.eval_k,
    };
    let path = dir.join("task.json");
    let json = serde_json::to_string_pretty(&header).map_err(|source| RdbError::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, json).map_err(io(&path))?;
    let link = task.task_type == TaskType::LinkPrediction;
    for split in Split::ALL {
        let path = dir.join(format!("task_{split}.csv"));
        let csv_err = |source| RdbError::Csv {
            path: path.clone(),
            source,
        };
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        if link {
            w.write_record(["entity_id", "target_id", "timestamp", "label"])
        } else {
            w.write_record(["entity_id", "timestamp", "label"])
        }
        .map_err(csv_err)?;
        for r in task.records(split) {
            let mut cells = vec![r.entity.to_string()];
            if link {
                cells.push(r.target.map(|t| t.to_string()).unwrap_or_default());
            }
            cells.push(r.timestamp.to_string());
            cells.push(r.label.to_string());
            w.write_record(&cells).map_err(csv_err)?;
        }
        w.flush().map_err(io(&path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rdb::fixtures::review_db;

    fn task() -> TaskSpec {
        let rec = |entity, timestamp, label| LabelRecord {
            entity,
            target: None,
            timestamp,
            label,
        };
        TaskSpec {
            name: "user-churn".into(),
            task_type: TaskType::Classification,
            entity_table: "user".into(),
            target_table: None,
            split: SplitCuts {
                train_end: 100,
                val_end: 200,
                test_end: 300,
            },
            eval_k: 10,
            train: vec![rec(1, 50, 1.0), rec(2, 100, 0.0)],
            val: vec![rec(1, 150, 0.0)],
            test: vec![rec(2, 300, 1.0)],
        }
    }

    #[test]
    fn round_trips_through_files() {
        let db = review_db();
        let dir = tempfile::tempdir().unwrap();
        write_task(dir.path(), &task()).unwrap();
        assert_eq!(load_task(dir.path(), &db).unwrap(), task());
    }

    #[test]
    fn rejects_unknown_entity_and_bad_labels() {
        let db = review_db();
        let mut t = task();
        t.train[0].entity = 77;
        assert!(t.validate(&db).is_err());
        let mut t = task();
        t.val[0].label = 0.5;
        assert!(t.validate(&db).is_err());
    }

    #[test]
    fn rejects_non_increasing_cuts_and_out_of_window() {
        let db = review_db();
        let mut t = task();
        t.split.val_end = 100;
        assert!(t.validate(&db).is_err());
        let mut t = task();
        t.test[0].timestamp = 150;
        assert!(t.validate(&db).is_err());
    }
}
