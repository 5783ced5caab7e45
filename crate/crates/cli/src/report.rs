use std::path::Path;

use relgate::rdb::canonical_form;
use relgate::RelationalDatabase;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

/// One per invocation, success or not.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub status: Status,
    pub exit_code: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: Value,
    pub dataset_digest: Option<String>,
    pub metrics: Map<String, Value>,
    pub structure: Option<String>,
    pub wall_clock_secs: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
}

impl RunReport {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            status: Status::Ok,
            exit_code: 0,
            error: None,
            config: Value::Null,
            dataset_digest: None,
            metrics: Map::new(),
            structure: None,
            wall_clock_secs: 0.0,
            seed,
        }
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.metrics.insert(key.to_string(), v);
    }

    pub fn digest(&mut self, db: &RelationalDatabase) {
        self.dataset_digest = Some(dataset_digest(db));
    }

    pub fn emit(&self, path: Option<&Path>) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        println!("{text}");
        if let Some(p) = path {
            std::fs::write(p, format!("{text}\n"))?;
        }
        Ok(())
    }
}

/// SHA-256 of the canonical form, so row order and id assignment do not
/// change it.
pub fn dataset_digest(db: &RelationalDatabase) -> String {
    hex::encode(Sha256::digest(canonical_form(db)))
}
