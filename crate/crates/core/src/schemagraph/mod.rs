//! Schema graph, table-as-edge relation triples and role assignments.
//!
//! Tables are vertices and every declared foreign key is an arc pointing
//! from the referencing table to the referenced one. Two three-table
//! patterns are derived from pairs of arcs:
//!
//! * co-occurrence `u ← v → w`: a row of `v` references both endpoints;
//! * completion `u → v → w`: `v` sits between a referencing and a
//!   referenced table.
//!
//! The `u → v ← w` pattern (a shared dimension table) is never produced.

pub mod gsl;
mod reg;

pub use reg::{
    construct_reg, invert_reg, EdgeRecord, EdgeSet, FpkEdges, GraphSummary, NodeSet, PathInstance,
    PathRelation, RelationalEntityGraph, DEFAULT_PATH_CAP,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rdb::{RdbError, Schema};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("triple {triple} would materialise {count} path instances (cap {cap})")]
    PathCap {
        triple: String,
        count: usize,
        cap: usize,
    },
    #[error("role assignment names unknown triple {0}")]
    UnknownTriple(String),
    #[error("role assignment is missing triple {0}")]
    MissingRole(String),
    #[error("cannot reconstruct the database: {0}")]
    MissingProvenance(String),
    #[error(transparent)]
    Rdb(#[from] RdbError),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArcId(pub usize);

/// One foreign key: `source.column → target`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaArc {
    pub source: String,
    /// Position of the key among the source table's declared foreign keys.
    pub fk_index: usize,
    pub column: String,
    pub target: String,
}

impl SchemaArc {
    pub fn is_self_reference(&self) -> bool {
        self.source == self.target
    }

    pub fn label(&self) -> String {
        format!("{}.{}->{}", self.source, self.column, self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaGraph {
    tables: Vec<String>,
    arcs: Vec<SchemaArc>,
}

impl SchemaGraph {
    pub fn from_schema(schema: &Schema) -> Self {
        let mut tables: Vec<String> = schema.tables.iter().map(|t| t.name.clone()).collect();
        tables.sort();
        let mut specs: Vec<_> = schema.tables.iter().collect();
        specs.sort_by(|a, b| a.name.cmp(&b.name));
        let arcs = specs
            .iter()
            .flat_map(|t| {
                t.foreign_keys.iter().enumerate().map(|(k, fk)| SchemaArc {
                    source: t.name.clone(),
                    fk_index: k,
                    column: fk.column.clone(),
                    target: fk.references.clone(),
                })
            })
            .collect();
        Self { tables, arcs }
    }

    pub fn tables(&self) -> &[String] {
        &self.tables
    }

    pub fn arcs(&self) -> &[SchemaArc] {
        &self.arcs
    }

    pub fn arc(&self, id: ArcId) -> &SchemaArc {
        &self.arcs[id.0]
    }

    pub fn arc_ids(&self) -> impl Iterator<Item = ArcId> {
        (0..self.arcs.len()).map(ArcId)
    }

    /// Arc for the `fk_index`-th foreign key of `table`.
    pub fn arc_of(&self, table: &str, fk_index: usize) -> Option<ArcId> {
        self.arcs
            .iter()
            .position(|a| a.source == table && a.fk_index == fk_index)
            .map(ArcId)
    }
}

pub fn build_schema_graph(db: &crate::rdb::RelationalDatabase) -> SchemaGraph {
    SchemaGraph::from_schema(&db.schema())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    CoOccurrence,
    Completion,
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::CoOccurrence => "cooccurrence",
            Pattern::Completion => "completion",
        })
    }
}

/// A `u – v – w` relation with messages flowing from `u` to `w` via `v`.
///
/// `arc_vw` is always the arc `v → w`. `arc_u` is `v → u` for
/// co-occurrence and `u → v` for completion.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeRelationTriple {
    pub pattern: Pattern,
    pub u: String,
    pub v: String,
    pub w: String,
    pub arc_u: ArcId,
    pub arc_vw: ArcId,
}

impl EdgeRelationTriple {
    /// Stable identifier, e.g. `cooccurrence:review.user_id->user|review.product_id->product`.
    pub fn id(&self, sg: &SchemaGraph) -> String {
        format!(
            "{}:{}|{}",
            self.pattern,
            sg.arc(self.arc_u).label(),
            sg.arc(self.arc_vw).label()
        )
    }

    /// The co-occurrence triple with `u` and `w` swapped.
    pub fn reversed(&self) -> Option<EdgeRelationTriple> {
        (self.pattern == Pattern::CoOccurrence).then(|| EdgeRelationTriple {
            pattern: Pattern::CoOccurrence,
            u: self.w.clone(),
            v: self.v.clone(),
            w: self.u.clone(),
            arc_u: self.arc_vw,
            arc_vw: self.arc_u,
        })
    }
}

/// All co-occurrence triples (both orientations) and completion triples.
/// Self-referencing arcs never take part.
pub fn enumerate_edge_triples(sg: &SchemaGraph) -> Vec<EdgeRelationTriple> {
    let mut out = Vec::new();
    let arcs: Vec<(ArcId, &SchemaArc)> = sg
        .arc_ids()
        .map(|id| (id, sg.arc(id)))
        .filter(|(_, a)| !a.is_self_reference())
        .collect();
    for &(ia, a) in &arcs {
        for &(ib, b) in &arcs {
            // u ← v → w: two distinct keys of the same table v
            if ia != ib && a.source == b.source {
                out.push(EdgeRelationTriple {
                    pattern: Pattern::CoOccurrence,
                    u: a.target.clone(),
                    v: a.source.clone(),
                    w: b.target.clone(),
                    arc_u: ia,
                    arc_vw: ib,
                });
            }
            // u → v → w: a ends where b starts
            if a.target == b.source {
                out.push(EdgeRelationTriple {
                    pattern: Pattern::Completion,
                    u: a.source.clone(),
                    v: a.target.clone(),
                    w: b.target.clone(),
                    arc_u: ia,
                    arc_vw: ib,
                });
            }
        }
    }
    out.sort();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// The intermediate table stays a node; the triple is not used.
    Node,
    /// The intermediate table acts as an edge carrying its attributes.
    Edge,
    /// Both readings are kept and weighed by a learned gate.
    Learn,
}

/// Role per triple, keyed by [`EdgeRelationTriple::id`].
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub roles: BTreeMap<String, Role>,
}

impl RoleAssignment {
    pub fn uniform(sg: &SchemaGraph, triples: &[EdgeRelationTriple], role: Role) -> Self {
        Self {
            roles: triples.iter().map(|t| (t.id(sg), role)).collect(),
        }
    }

    /// Independent uniform choice between node and edge per triple.
    pub fn random(sg: &SchemaGraph, triples: &[EdgeRelationTriple], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            roles: triples
                .iter()
                .map(|t| (t.id(sg), if rng.gen_bool(0.5) { Role::Edge } else { Role::Node }))
                .collect(),
        }
    }

    pub fn role(&self, sg: &SchemaGraph, t: &EdgeRelationTriple) -> Option<Role> {
        self.roles.get(&t.id(sg)).copied()
    }

    /// Every named triple exists and every triple has a role.
    pub fn validate(&self, sg: &SchemaGraph, triples: &[EdgeRelationTriple]) -> Result<()> {
        let ids: BTreeSet<String> = triples.iter().map(|t| t.id(sg)).collect();
        if let Some(unknown) = self.roles.keys().find(|k| !ids.contains(*k)) {
            return Err(GraphError::UnknownTriple(unknown.clone()));
        }
        if let Some(missing) = ids.iter().find(|k| !self.roles.contains_key(*k)) {
            return Err(GraphError::MissingRole(missing.clone()));
        }
        Ok(())
    }

    /// Tables stored as edges: intermediates whose every triple has the
    /// edge role.
    pub fn edge_tables(&self, sg: &SchemaGraph, triples: &[EdgeRelationTriple]) -> BTreeSet<String> {
        let mut verdict: BTreeMap<&str, bool> = BTreeMap::new();
        for t in triples {
            let is_edge = self.role(sg, t) == Some(Role::Edge);
            verdict
                .entry(t.v.as_str())
                .and_modify(|all| *all &= is_edge)
                .or_insert(is_edge);
        }
        verdict
            .into_iter()
            .filter(|(_, all)| *all)
            .map(|(t, _)| t.to_string())
            .collect()
    }
}

/// Orientation of a stored foreign-key edge. `Forward` runs from the
/// referencing row to the referenced row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Reverse,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Forward => Direction::Reverse,
            Direction::Reverse => Direction::Forward,
        }
    }
}

/// A typed node-level relation: an arc read in one direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeRelation {
    pub arc: ArcId,
    pub dir: Direction,
}

impl NodeRelation {
    /// Table whose rows send messages along this relation.
    pub fn src_table<'a>(&self, sg: &'a SchemaGraph) -> &'a str {
        let a = sg.arc(self.arc);
        match self.dir {
            Direction::Forward => &a.source,
            Direction::Reverse => &a.target,
        }
    }

    /// Table whose rows receive messages along this relation.
    pub fn dst_table<'a>(&self, sg: &'a SchemaGraph) -> &'a str {
        let a = sg.arc(self.arc);
        match self.dir {
            Direction::Forward => &a.target,
            Direction::Reverse => &a.source,
        }
    }

    pub fn label(&self, sg: &SchemaGraph) -> String {
        let tag = match self.dir {
            Direction::Forward => "fwd",
            Direction::Reverse => "rev",
        };
        format!("{}:{tag}", sg.arc(self.arc).label())
    }
}

/// Both directions of every arc, in arc order.
pub fn node_relations(sg: &SchemaGraph) -> Vec<NodeRelation> {
    sg.arc_ids()
        .flat_map(|arc| {
            [Direction::Forward, Direction::Reverse]
                .into_iter()
                .map(move |dir| NodeRelation { arc, dir })
        })
        .collect()
}
