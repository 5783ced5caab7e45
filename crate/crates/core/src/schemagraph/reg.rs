//! Full-resolution relational entity graph and its inverse.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use super::{
    enumerate_edge_triples, ArcId, Direction, EdgeRelationTriple, GraphError, Result, Role,
    RoleAssignment, SchemaGraph,
};
use crate::rdb::{RelationalDatabase, Table, Value};

pub const DEFAULT_PATH_CAP: usize = 5_000_000;

/// Rows of one table as graph nodes, indexed by local position.
#[derive(Debug, Clone)]
pub struct NodeSet {
    pub table: String,
    pub len: usize,
    /// Primary key of every node. Provenance: needed to invert.
    pub keys: Option<Vec<i64>>,
    pub times: Vec<Option<i64>>,
    /// Non-key cells, in `attr_columns` order. `None` when the table is
    /// stored as edges and its attributes live on [`EdgeSet`].
    pub attrs: Option<Vec<Vec<Value>>>,
    pub attr_columns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRecord {
    /// Local index of the endpoint for each foreign key; `None` for NULL.
    pub endpoints: Vec<Option<usize>>,
    pub attrs: Vec<Value>,
}

/// A table read as a set of (hyper)edges. `records[i]` belongs to node `i`
/// of the same table.
#[derive(Debug, Clone)]
pub struct EdgeSet {
    pub table: String,
    pub records: Vec<EdgeRecord>,
}

/// Foreign-key incidences of one arc in both directions.
#[derive(Debug, Clone)]
pub struct FpkEdges {
    pub arc: ArcId,
    /// `(referencing local, referenced local)`; the origin row of each edge
    /// is its first element.
    pub forward: Vec<(usize, usize)>,
    /// The same incidences as `(referenced local, referencing local)`.
    pub reverse: Vec<(usize, usize)>,
    /// Provenance tags of the two lists.
    pub forward_tag: Option<Direction>,
    pub reverse_tag: Option<Direction>,
    target_of: Vec<Option<usize>>,
    ref_offsets: Vec<usize>,
    ref_items: Vec<usize>,
}

impl FpkEdges {
    /// Referenced row of a referencing row.
    pub fn target_of(&self, src: usize) -> Option<usize> {
        self.target_of[src]
    }

    /// Referencing rows of a referenced row, ascending.
    pub fn referrers(&self, dst: usize) -> &[usize] {
        &self.ref_items[self.ref_offsets[dst]..self.ref_offsets[dst + 1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct PathInstance {
    pub u: usize,
    pub v: usize,
    pub w: usize,
}

/// Materialised `u – v – w` instances of one triple, grouped by `w`.
#[derive(Debug, Clone)]
pub struct PathRelation {
    pub triple: EdgeRelationTriple,
    pub instances: Vec<PathInstance>,
    offsets: Vec<usize>,
}

impl PathRelation {
    pub fn ending_at(&self, w: usize) -> &[PathInstance] {
        &self.instances[self.offsets[w]..self.offsets[w + 1]]
    }
}

#[derive(Debug, Clone)]
pub struct RelationalEntityGraph {
    pub schema_graph: SchemaGraph,
    pub triples: Vec<EdgeRelationTriple>,
    pub roles: RoleAssignment,
    pub nodes: BTreeMap<String, NodeSet>,
    pub edges: BTreeMap<String, EdgeSet>,
    /// One entry per schema arc, in arc order.
    pub fpk: Vec<FpkEdges>,
    /// One entry per triple whose role is edge or learn.
    pub paths: Vec<PathRelation>,
    /// NULL foreign keys skipped per arc label.
    pub dropped_null_links: BTreeMap<String, usize>,
    templates: BTreeMap<String, Table>,
    key_index: BTreeMap<String, HashMap<i64, usize>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphSummary {
    pub node_sets: BTreeMap<String, usize>,
    pub edge_tables: Vec<String>,
    pub fpk_edges: BTreeMap<String, usize>,
    pub path_instances: BTreeMap<String, usize>,
    pub roles: BTreeMap<String, Role>,
    pub dropped_null_links: BTreeMap<String, usize>,
}

fn csr(n: usize, pairs: &[(usize, usize)]) -> (Vec<usize>, Vec<usize>) {
    let mut offsets = vec![0usize; n + 1];
    for &(a, _) in pairs {
        offsets[a + 1] += 1;
    }
    for i in 0..n {
        offsets[i + 1] += offsets[i];
    }
    let mut fill = offsets.clone();
    let mut items = vec![0usize; pairs.len()];
    for &(a, b) in pairs {
        items[fill[a]] = b;
        fill[a] += 1;
    }
    (offsets, items)
}

impl RelationalEntityGraph {
    pub fn node_set(&self, table: &str) -> &NodeSet {
        &self.nodes[table]
    }

    pub fn num_nodes(&self, table: &str) -> usize {
        self.nodes.get(table).map_or(0, |n| n.len)
    }

    pub fn fpk(&self, arc: ArcId) -> &FpkEdges {
        &self.fpk[arc.0]
    }

    /// Non-key attributes of a node, wherever they are stored.
    pub fn attrs(&self, table: &str, local: usize) -> &[Value] {
        let ns = &self.nodes[table];
        match &ns.attrs {
            Some(a) => &a[local],
            None => &self.edges[table].records[local].attrs,
        }
    }

    pub fn template(&self, table: &str) -> &Table {
        &self.templates[table]
    }

    /// Schema of the database the graph was built from.
    pub fn schema(&self) -> crate::rdb::Schema {
        crate::rdb::Schema {
            tables: self.templates.values().map(|t| t.spec().clone()).collect(),
        }
    }

    /// Path relation of a triple, if materialised.
    pub fn path(&self, triple: &EdgeRelationTriple) -> Option<&PathRelation> {
        self.paths.iter().find(|p| &p.triple == triple)
    }

    pub fn local_of(&self, table: &str, key: i64) -> Option<usize> {
        self.key_index.get(table)?.get(&key).copied()
    }

    /// Removes primary keys and direction tags. The graph stays usable for
    /// message passing but can no longer be inverted.
    pub fn strip_provenance(&mut self) {
        for ns in self.nodes.values_mut() {
            ns.keys = None;
        }
        for f in &mut self.fpk {
            f.forward_tag = None;
            f.reverse_tag = None;
        }
    }

    pub fn summary(&self) -> GraphSummary {
        let sg = &self.schema_graph;
        GraphSummary {
            node_sets: self.nodes.iter().map(|(k, v)| (k.clone(), v.len)).collect(),
            edge_tables: self.edges.keys().cloned().collect(),
            fpk_edges: self
                .fpk
                .iter()
                .map(|f| (sg.arc(f.arc).label(), f.forward.len()))
                .collect(),
            path_instances: self
                .paths
                .iter()
                .map(|p| (p.triple.id(sg), p.instances.len()))
                .collect(),
            roles: self.roles.roles.clone(),
            dropped_null_links: self.dropped_null_links.clone(),
        }
    }
}

fn count_paths(
    t: &EdgeRelationTriple,
    fpk: &[FpkEdges],
    nodes: &BTreeMap<String, NodeSet>,
) -> usize {
    let a = &fpk[t.arc_u.0];
    let b = &fpk[t.arc_vw.0];
    match t.pattern {
        super::Pattern::CoOccurrence => (0..nodes[&t.v].len)
            .filter(|&v| a.target_of(v).is_some() && b.target_of(v).is_some())
            .count(),
        super::Pattern::Completion => (0..nodes[&t.u].len)
            .filter_map(|u| a.target_of(u))
            .filter(|&v| b.target_of(v).is_some())
            .count(),
    }
}

fn materialise(
    t: &EdgeRelationTriple,
    fpk: &[FpkEdges],
    nodes: &BTreeMap<String, NodeSet>,
) -> PathRelation {
    let a = &fpk[t.arc_u.0];
    let b = &fpk[t.arc_vw.0];
    let mut instances: Vec<PathInstance> = match t.pattern {
        super::Pattern::CoOccurrence => (0..nodes[&t.v].len)
            .filter_map(|v| Some(PathInstance { u: a.target_of(v)?, v, w: b.target_of(v)? }))
            .collect(),
        super::Pattern::Completion => (0..nodes[&t.u].len)
            .filter_map(|u| {
                let v = a.target_of(u)?;
                Some(PathInstance { u, v, w: b.target_of(v)? })
            })
            .collect(),
    };
    instances.sort_by_key(|p| (p.w, p.v, p.u));
    let nw = nodes[&t.w].len;
    let mut offsets = vec![0usize; nw + 1];
    for p in &instances {
        offsets[p.w + 1] += 1;
    }
    for i in 0..nw {
        offsets[i + 1] += offsets[i];
    }
    PathRelation {
        triple: t.clone(),
        instances,
        offsets,
    }
}

/// Builds the graph for `db` under `roles`. Every row becomes a node,
/// every non-NULL foreign key a forward and a reverse edge, and every
/// triple whose role is edge or learn a path relation.
pub fn construct_reg(
    db: &RelationalDatabase,
    roles: &RoleAssignment,
    path_cap: usize,
) -> Result<RelationalEntityGraph> {
    let sg = SchemaGraph::from_schema(&db.schema());
    let triples = enumerate_edge_triples(&sg);
    roles.validate(&sg, &triples)?;
    let edge_tables = roles.edge_tables(&sg, &triples);

    let mut key_index: BTreeMap<String, HashMap<i64, usize>> = BTreeMap::new();
    let mut nodes = BTreeMap::new();
    let mut templates = BTreeMap::new();
    for table in db.tables() {
        let spec = table.spec();
        let skip: BTreeSet<usize> = std::iter::once(table.pk_column())
            .chain(table.fk_columns().iter().copied())
            .collect();
        let attr_columns: Vec<usize> = (0..spec.columns.len()).filter(|c| !skip.contains(c)).collect();
        let attrs: Vec<Vec<Value>> = table
            .rows()
            .iter()
            .map(|r| attr_columns.iter().map(|&c| r[c]).collect())
            .collect();
        let keys: Vec<i64> = (0..table.len()).map(|i| table.pk(i)).collect();
        key_index.insert(
            table.name().to_string(),
            keys.iter().enumerate().map(|(i, &k)| (k, i)).collect(),
        );
        let is_edge = edge_tables.contains(table.name());
        nodes.insert(
            table.name().to_string(),
            NodeSet {
                table: table.name().to_string(),
                len: table.len(),
                keys: Some(keys),
                times: (0..table.len()).map(|i| table.timestamp(i)).collect(),
                attrs: (!is_edge).then_some(attrs),
                attr_columns,
            },
        );
        templates.insert(table.name().to_string(), table.empty_like());
    }

    let mut fpk = Vec::with_capacity(sg.arcs().len());
    let mut dropped = BTreeMap::new();
    for id in sg.arc_ids() {
        let arc = sg.arc(id);
        let src = db.table(&arc.source).expect("arc source exists");
        let dst_index = &key_index[&arc.target];
        let mut target_of = vec![None; src.len()];
        let mut forward = Vec::new();
        let mut nulls = 0;
        for (i, slot) in target_of.iter_mut().enumerate() {
            match src.fk_value(i, arc.fk_index) {
                Some(k) => {
                    if let Some(&j) = dst_index.get(&k) {
                        *slot = Some(j);
                        forward.push((i, j));
                    } else {
                        nulls += 1;
                    }
                }
                None => nulls += 1,
            }
        }
        if nulls > 0 {
            dropped.insert(arc.label(), nulls);
        }
        let mut reverse: Vec<(usize, usize)> = forward.iter().map(|&(a, b)| (b, a)).collect();
        reverse.sort_unstable();
        let (ref_offsets, ref_items) = csr(nodes[&arc.target].len, &reverse);
        fpk.push(FpkEdges {
            arc: id,
            forward,
            reverse,
            forward_tag: Some(Direction::Forward),
            reverse_tag: Some(Direction::Reverse),
            target_of,
            ref_offsets,
            ref_items,
        });
    }

    let mut edges = BTreeMap::new();
    for name in &edge_tables {
        let table = db.table(name).expect("edge table exists");
        let arcs: Vec<ArcId> = (0..table.fk_columns().len())
            .map(|k| sg.arc_of(name, k).expect("arc per key"))
            .collect();
        let ns = nodes.get_mut(name).expect("node set");
        let attr_columns = ns.attr_columns.clone();
        let records = (0..table.len())
            .map(|i| EdgeRecord {
                endpoints: arcs.iter().map(|a| fpk[a.0].target_of(i)).collect(),
                attrs: attr_columns.iter().map(|&c| table.row(i)[c]).collect(),
            })
            .collect();
        edges.insert(
            name.clone(),
            EdgeSet {
                table: name.clone(),
                records,
            },
        );
    }

    let mut paths = Vec::new();
    for t in &triples {
        if roles.role(&sg, t) == Some(Role::Node) {
            continue;
        }
        let count = count_paths(t, &fpk, &nodes);
        if count > path_cap {
            return Err(GraphError::PathCap {
                triple: t.id(&sg),
                count,
                cap: path_cap,
            });
        }
        paths.push(materialise(t, &fpk, &nodes));
    }

    Ok(RelationalEntityGraph {
        schema_graph: sg,
        triples,
        roles: roles.clone(),
        nodes,
        edges,
        fpk,
        paths,
        dropped_null_links: dropped,
        templates,
        key_index,
    })
}

/// Rebuilds the database from node keys, stored attributes and the
/// tagged forward incidences.
pub fn invert_reg(reg: &RelationalEntityGraph) -> Result<RelationalDatabase> {
    let sg = &reg.schema_graph;
    let mut tables = Vec::with_capacity(reg.templates.len());
    for (name, template) in &reg.templates {
        let ns = &reg.nodes[name];
        let keys = ns
            .keys
            .as_ref()
            .ok_or_else(|| GraphError::MissingProvenance(format!("node keys of {name}")))?;
        let fk_cols = template.fk_columns();
        let arcs: Vec<ArcId> = (0..fk_cols.len())
            .map(|k| sg.arc_of(name, k).expect("arc per key"))
            .collect();
        for &a in &arcs {
            if reg.fpk[a.0].forward_tag != Some(Direction::Forward) {
                return Err(GraphError::MissingProvenance(format!(
                    "direction tag of {}",
                    sg.arc(a).label()
                )));
            }
        }
        let edge_set = reg.edges.get(name);
        let mut table = template.empty_like();
        let ncols = template.spec().columns.len();
        for i in 0..ns.len {
            let mut row = vec![Value::Null; ncols];
            row[template.pk_column()] = Value::Int(keys[i]);
            for (slot, &c) in ns.attr_columns.iter().enumerate() {
                row[c] = reg.attrs(name, i)[slot];
            }
            for (k, &a) in arcs.iter().enumerate() {
                let target = match edge_set {
                    Some(e) => e.records[i].endpoints[k],
                    None => reg.fpk[a.0].target_of(i),
                };
                if let Some(j) = target {
                    let target_table = &sg.arc(a).target;
                    let tkeys = reg.nodes[target_table].keys.as_ref().ok_or_else(|| {
                        GraphError::MissingProvenance(format!("node keys of {target_table}"))
                    })?;
                    row[fk_cols[k]] = Value::Int(tkeys[j]);
                }
            }
            table.push_row(i, row)?;
        }
        tables.push(table);
    }
    Ok(RelationalDatabase::from_tables(tables)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rdb::fixtures::review_db;
    use crate::rdb::{canonical_form, ColumnKind, ColumnSpec, ForeignKeySpec, Schema, TableSpec};

    fn all(db: &RelationalDatabase, role: Role) -> RoleAssignment {
        let sg = SchemaGraph::from_schema(&db.schema());
        RoleAssignment::uniform(&sg, &enumerate_edge_triples(&sg), role)
    }

    #[test]
    fn node_per_row_and_two_edges_per_key() {
        let db = review_db();
        let reg = construct_reg(&db, &all(&db, Role::Node), DEFAULT_PATH_CAP).unwrap();
        for t in db.tables() {
            assert_eq!(reg.num_nodes(t.name()), t.len());
        }
        let total: usize = reg.fpk.iter().map(|f| f.forward.len() + f.reverse.len()).sum();
        assert_eq!(total, 2 * 3 * 2);
        assert!(reg.paths.is_empty());
    }

    #[test]
    fn review_as_edge_inverts_exactly() {
        let db = review_db();
        let reg = construct_reg(&db, &all(&db, Role::Edge), DEFAULT_PATH_CAP).unwrap();
        assert!(reg.edges.contains_key("review"));
        assert!(reg.nodes["review"].attrs.is_none());
        let back = invert_reg(&reg).unwrap();
        assert_eq!(canonical_form(&db), canonical_form(&back));
    }

    #[test]
    fn every_role_inverts() {
        let db = review_db();
        for role in [Role::Node, Role::Edge, Role::Learn] {
            let reg = construct_reg(&db, &all(&db, role), DEFAULT_PATH_CAP).unwrap();
            assert_eq!(canonical_form(&db), canonical_form(&invert_reg(&reg).unwrap()));
        }
    }

    #[test]
    fn stripped_graph_refuses_inversion() {
        let db = review_db();
        let mut reg = construct_reg(&db, &all(&db, Role::Edge), DEFAULT_PATH_CAP).unwrap();
        reg.strip_provenance();
        assert!(matches!(invert_reg(&reg), Err(GraphError::MissingProvenance(_))));
    }

    #[test]
    fn path_instances_match_nested_loop_join() {
        let db = review_db();
        let reg = construct_reg(&db, &all(&db, Role::Edge), DEFAULT_PATH_CAP).unwrap();
        let review = db.table("review").unwrap();
        let user = db.table("user").unwrap();
        let product = db.table("product").unwrap();
        for p in &reg.paths {
            let forward = p.triple.u == "user";
            let mut oracle = Vec::new();
            for r in 0..review.len() {
                for u in 0..user.len() {
                    for q in 0..product.len() {
                        if review.fk_value(r, 0) == Some(user.pk(u))
                            && review.fk_value(r, 1) == Some(product.pk(q))
                        {
                            oracle.push(if forward {
                                PathInstance { u, v: r, w: q }
                            } else {
                                PathInstance { u: q, v: r, w: u }
                            });
                        }
                    }
                }
            }
            oracle.sort_by_key(|p| (p.w, p.v, p.u));
            assert_eq!(p.instances, oracle);
            let nw = reg.num_nodes(&p.triple.w);
            let grouped: usize = (0..nw).map(|w| p.ending_at(w).len()).sum();
            assert_eq!(grouped, oracle.len());
        }
    }

    #[test]
    fn path_cap_names_triple() {
        let db = review_db();
        let err = construct_reg(&db, &all(&db, Role::Edge), 2).unwrap_err();
        match err {
            GraphError::PathCap { triple, count, cap } => {
                assert!(triple.contains("review"));
                assert_eq!((count, cap), (3, 2));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn null_keys_drop_links_and_survive_inversion() {
        let int = |n: &str, nullable| ColumnSpec {
            name: n.into(),
            kind: ColumnKind::Integer,
            nullable,
        };
        let schema = Schema {
            tables: vec![
                TableSpec {
                    name: "a".into(),
                    columns: vec![int("id", false)],
                    primary_key: "id".into(),
                    foreign_keys: vec![],
                    time_column: None,
                },
                TableSpec {
                    name: "b".into(),
                    columns: vec![int("id", false), int("a_id", true)],
                    primary_key: "id".into(),
                    foreign_keys: vec![ForeignKeySpec {
                        column: "a_id".into(),
                        references: "a".into(),
                    }],
                    time_column: None,
                },
            ],
        };
        let s = |r: &[&str]| r.iter().map(|c| c.to_string()).collect::<Vec<_>>();
        let rows = BTreeMap::from([
            ("a".to_string(), vec![s(&["1"])]),
            ("b".to_string(), vec![s(&["5", "1"]), s(&["6", ""])]),
        ]);
        let db = RelationalDatabase::from_raw(&schema, &rows).unwrap();
        let reg = construct_reg(&db, &RoleAssignment::default(), DEFAULT_PATH_CAP).unwrap();
        assert_eq!(reg.fpk[0].forward.len(), 1);
        assert_eq!(reg.dropped_null_links.values().sum::<usize>(), 1);
        assert_eq!(canonical_form(&db), canonical_form(&invert_reg(&reg).unwrap()));
    }

    #[test]
    fn referrers_and_targets_agree() {
        let db = review_db();
        let reg = construct_reg(&db, &all(&db, Role::Node), DEFAULT_PATH_CAP).unwrap();
        for f in &reg.fpk {
            let mut by_dst: HashMap<usize, Vec<usize>> = HashMap::new();
            for &(s, d) in &f.forward {
                assert_eq!(f.target_of(s), Some(d));
                by_dst.entry(d).or_default().push(s);
            }
            for (d, mut srcs) in by_dst {
                srcs.sort_unstable();
                assert_eq!(f.referrers(d), srcs.as_slice());
            }
        }
    }

    #[test]
    fn summary_serialises() {
        let db = review_db();
        let reg = construct_reg(&db, &all(&db, Role::Edge), DEFAULT_PATH_CAP).unwrap();
        let json = serde_json::to_value(reg.summary()).unwrap();
        assert_eq!(json["node_sets"]["review"], 3);
        assert_eq!(json["edge_tables"][0], "review");
    }
}
