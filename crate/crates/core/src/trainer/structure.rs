use serde::{Deserialize, Serialize};

use crate::model::{GatedModel, GateMode, GateState};
use crate::schemagraph::{EdgeRelationTriple, Pattern, SchemaGraph};

/// Learned role of one edge triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureEntry {
    pub triple: String,
    pub pattern: String,
    pub u: String,
    pub v: String,
    pub w: String,
    pub gbar: f64,
    pub mode: GateMode,
    /// `"edge"` when `gbar >= 0.5`, else `"node"`.
    pub dominant: String,
    /// For co-occurrence triples whose reversed orientation also exists:
    /// `"same"` when both gates are within 0.1, else `"diff"`.
    pub consistency: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub task: Option<String>,
    pub entries: Vec<StructureEntry>,
}

impl StructureReport {
    pub fn from_model(model: &GatedModel, task: Option<&str>) -> Self {
        Self::from_gates(model.schema_graph(), model.triples(), &model.gates, task)
    }

    /// Report for gates aligned with `triples`.
    pub fn from_gates(sg: &SchemaGraph, triples: &[EdgeRelationTriple], gates: &[GateState], task: Option<&str>) -> Self {
        let gbar = |id: &str| gates.iter().find(|g| g.triple == id).map(|g| g.gbar);
        let entries = triples
            .iter()
            .zip(gates)
            .map(|(t, g)| {
                let consistency = match t.pattern {
                    Pattern::CoOccurrence => t.reversed().and_then(|r| gbar(&r.id(sg))).map(|other| {
                        if (other - g.gbar).abs() < 0.1 { "same" } else { "diff" }.to_string()
                    }),
                    Pattern::Completion => None,
                };
                StructureEntry {
                    triple: g.triple.clone(),
                    pattern: t.pattern.to_string(),
                    u: t.u.clone(),
                    v: t.v.clone(),
                    w: t.w.clone(),
                    gbar: g.gbar,
                    mode: g.mode,
                    dominant: if g.gbar >= 0.5 { "edge" } else { "node" }.to_string(),
                    consistency,
                }
            })
            .collect();
        Self {
            task: task.map(str::to_string),
            entries,
        }
    }

    pub fn entry(&self, triple: &str) -> Option<&StructureEntry> {
        self.entries.iter().find(|e| e.triple == triple)
    }
}
