//! Checkpoint directory: `params.ckpt`, `gates.json`, `model.json`, plus
//! `structure.json`, `metrics.csv` and `fd_diagnostics.csv` after training.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, StructureReport, TrainConfig, TrainError, TrainOutcome, Trainer, Workspace};
use crate::model::{FeatureStats, GateState, ModelConfig};
use crate::rdb::{RelationalDatabase, Schema, TaskSpec, TaskType};
use crate::schemagraph::SchemaGraph;
use crate::tensor::{read_checkpoint, write_checkpoint, Tensor};

const META_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub task: String,
    pub task_type: TaskType,
    pub entity_table: String,
    pub target_table: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stats: FeatureStats,
    pub triple_ids: Vec<String>,
    pub tables: Vec<String>,
    pub schema: Schema,
}

/// Running gates of a trained model, tagged with the task they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateFile {
    pub task: String,
    pub gates: Vec<GateState>,
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub gates: GateFile,
    pub params: Vec<(String, Tensor)>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), value)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| TrainError::Incompatible(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| TrainError::Incompatible(format!("{}: {e}", path.display())))
}

pub fn read_gate_file(dir: impl AsRef<Path>) -> Result<GateFile> {
    read_json(&dir.as_ref().join("gates.json"))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let dir = dir.as_ref();
    let meta: CheckpointMeta = read_json(&dir.join("model.json"))?;
    if meta.version != META_VERSION {
        return Err(TrainError::Incompatible(format!("unsupported checkpoint version {}", meta.version)));
    }
    let gates = read_gate_file(dir)?;
    let f = File::open(dir.join("params.ckpt"))?;
    let params = read_checkpoint(BufReader::new(f)).map_err(|e| TrainError::Incompatible(e.to_string()))?;
    Ok(LoadedCheckpoint { meta, gates, params })
}

impl LoadedCheckpoint {
    /// Structure report rebuilt from the stored schema and gates.
    pub fn structure(&self) -> Result<StructureReport> {
        let sg = SchemaGraph::from_schema(&self.meta.schema);
        let triples: Vec<_> = crate::schemagraph::enumerate_edge_triples(&sg)
            .into_iter()
            .filter(|t| self.meta.triple_ids.contains(&t.id(&sg)))
            .collect();
        let ids: Vec<String> = triples.iter().map(|t| t.id(&sg)).collect();
        if ids != self.meta.triple_ids || self.gates.gates.iter().map(|g| &g.triple).ne(ids.iter()) {
            return Err(TrainError::Incompatible("gates do not match the stored schema".into()));
        }
        Ok(StructureReport::from_gates(&sg, &triples, &self.gates.gates, Some(&self.gates.task)))
    }

    /// Cheap check, before any graph is built, that `task` on `db` is what
    /// the checkpoint was trained for.
    pub fn check_compatible(&self, db: &RelationalDatabase, task: &TaskSpec) -> Result<()> {
        check_task(&self.meta, task)?;
        if db.schema() != self.meta.schema {
            return Err(TrainError::Incompatible("database schema differs from the checkpoint's".into()));
        }
        Ok(())
    }
}

fn check_task(m: &CheckpointMeta, task: &TaskSpec) -> Result<()> {
    if m.task_type != task.task_type || m.entity_table != task.entity_table || m.target_table != task.target_table {
        return Err(TrainError::Incompatible(format!(
            "checkpoint predicts {:?} on {}, task {} predicts {:?} on {}",
            m.task_type, m.entity_table, task.name, task.task_type, task.entity_table
        )));
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            version: META_VERSION,
            task: self.task.name.clone(),
            task_type: self.task.task_type,
            entity_table: self.task.entity_table.clone(),
            target_table: self.task.target_table.clone(),
            model: self.model.config.clone(),
            train: self.config.clone(),
            stats: self.model.stats.clone(),
            triple_ids: self.model.triple_ids().to_vec(),
            tables: self.ws.reg.nodes.keys().cloned().collect(),
            schema: self.ws.reg.schema(),
        }
    }

    pub fn gate_file(&self) -> GateFile {
        GateFile {
            task: self.task.name.clone(),
            gates: self.model.gates.clone(),
        }
    }

    /// Writes parameters, gates and metadata; with an outcome also the
    /// structure report, metric history and FD diagnostics.
    pub fn save(&self, dir: impl AsRef<Path>, outcome: Option<&TrainOutcome>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let f = BufWriter::new(File::create(dir.join("params.ckpt"))?);
        write_checkpoint(f, self.store.named())?;
        write_json(&dir.join("gates.json"), &self.gate_file())?;
        write_json(&dir.join("model.json"), &self.meta())?;
        if let Some(o) = outcome {
            write_json(&dir.join("structure.json"), &o.structure)?;
            let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
            w.write_record(["epoch", "split", "metric", "l_task", "l_emb", "l_pair"])?;
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            for r in &o.history {
                w.write_record([
                    r.epoch.to_string(),
                    "train".into(),
                    String::new(),
                    opt(r.l_task),
                    opt(r.l_emb),
                    opt(r.l_pair),
                ])?;
                w.write_record([r.epoch.to_string(), "val".into(), opt(r.val), String::new(), String::new(), String::new()])?;
            }
            w.write_record([String::new(), "test".into(), opt(o.test.value), String::new(), String::new(), String::new()])?;
            w.flush()?;
            let mut w = csv::Writer::from_path(dir.join("fd_diagnostics.csv"))?;
            for row in &o.fd_diagnostics {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        Ok(())
    }

    /// Rebuilds a trainer for `task` from a checkpoint, checking that the
    /// task and graph match what the checkpoint was trained on.
    pub fn from_checkpoint(ckpt: &LoadedCheckpoint, task: &'a TaskSpec, ws: &'a Workspace) -> Result<Self> {
        let m = &ckpt.meta;
        check_task(m, task)?;
        if ws.reg.schema() != m.schema {
            return Err(TrainError::Incompatible("database schema differs from the checkpoint's".into()));
        }
        let tables: Vec<String> = ws.reg.nodes.keys().cloned().collect();
        if tables != m.tables {
            return Err(TrainError::Incompatible(format!(
                "node tables differ: checkpoint {:?}, database {tables:?}",
                m.tables
            )));
        }
        let mut t = Trainer::new(task, ws, m.model.clone(), m.train.clone())?;
        if t.model.triple_ids() != m.triple_ids.as_slice() {
            let have: Vec<&String> = t.model.triple_ids().iter().filter(|i| !m.triple_ids.contains(i)).collect();
            let missing: Vec<&String> = m.triple_ids.iter().filter(|i| !t.model.triple_ids().contains(i)).collect();
            return Err(TrainError::Incompatible(format!(
                "edge triples differ; missing {missing:?}, unexpected {have:?}"
            )));
        }
        t.store
            .load_named(ckpt.params.iter().cloned())
            .map_err(|e| TrainError::Incompatible(e.to_string()))?;
        if ckpt.gates.gates.len() != t.model.gates.len()
            || ckpt.gates.gates.iter().zip(&t.model.gates).any(|(a, b)| a.triple != b.triple)
        {
            return Err(TrainError::Incompatible("gate file does not match the model's triples".into()));
        }
        t.model.gates = ckpt.gates.gates.clone();
        Ok(t)
    }
}
