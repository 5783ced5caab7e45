//! Temporal neighbour sampling into disjoint per-seed subgraphs.
//!
//! A node or path instance is admissible for a seed when its timestamp is
//! at most the seed's prediction time; rows without a timestamp are always
//! admissible.

use std::collections::{BTreeMap, HashMap};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schemagraph::{node_relations, Direction, NodeRelation, RelationalEntityGraph};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SampleError {
    #[error("seed entity {entity} not found in table {table}")]
    UnknownSeed { table: String, entity: i64 },
    #[error("unknown table {0}")]
    UnknownTable(String),
    #[error("invalid sampler config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, SampleError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Neighbour budget `B`; hop `i` (seeds at hop 0) draws at most
    /// `⌊B / 2^i⌋` neighbours per relation and node.
    pub neighbor_samples: usize,
    pub num_hops: usize,
    pub seed: u64,
    /// Turning this off admits future rows. Only for leak tests.
    #[serde(default = "yes")]
    pub causal: bool,
}

fn yes() -> bool {
    true
}

impl SamplerConfig {
    pub fn new(neighbor_samples: usize, num_hops: usize, seed: u64) -> Self {
        Self {
            neighbor_samples,
            num_hops,
            seed,
            causal: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.neighbor_samples == 0 {
            return Err(SampleError::Config("neighbor_samples must be at least 1".into()));
        }
        if self.num_hops == 0 {
            return Err(SampleError::Config("num_hops must be at least 1".into()));
        }
        Ok(())
    }

    pub fn hop_budget(&self, hop: usize) -> usize {
        self.neighbor_samples.checked_shr(hop as u32).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedEntity {
    /// Primary key in the entity table.
    pub entity: i64,
    pub t_predict: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchNodes {
    /// Node index in the full graph.
    pub global: Vec<usize>,
    /// Seed whose subgraph owns the node.
    pub seed: Vec<usize>,
    pub hop: Vec<usize>,
}

impl BatchNodes {
    pub fn len(&self) -> usize {
        self.global.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global.is_empty()
    }

    fn push(&mut self, global: usize, seed: usize, hop: usize) -> usize {
        self.global.push(global);
        self.seed.push(seed);
        self.hop.push(hop);
        self.global.len() - 1
    }
}

/// Sampled edges of one node relation, as batch-local indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchEdges {
    pub relation: NodeRelation,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

/// Sampled instances of one materialised path relation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchPaths {
    /// Index into `RelationalEntityGraph::paths`.
    pub path: usize,
    pub u: Vec<usize>,
    pub v: Vec<usize>,
    pub w: Vec<usize>,
}

impl BatchPaths {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SampleCounts {
    pub node_branch: usize,
    pub edge_branch: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSubgraph {
    pub entity_table: String,
    pub seeds: Vec<SeedEntity>,
    /// Batch-local index of each seed in the entity table.
    pub seed_nodes: Vec<usize>,
    pub nodes: BTreeMap<String, BatchNodes>,
    /// One entry per node relation, in [`node_relations`] order.
    pub edges: Vec<BatchEdges>,
    /// One entry per materialised path relation.
    pub paths: Vec<BatchPaths>,
    pub counts: SampleCounts,
}

impl BatchSubgraph {
    pub fn num_nodes(&self, table: &str) -> usize {
        self.nodes.get(table).map_or(0, BatchNodes::len)
    }

    pub fn t_predict(&self, table: &str, local: usize) -> i64 {
        self.seeds[self.nodes[table].seed[local]].t_predict
    }
}

type Frontier<'a> = Vec<(&'a str, usize, usize)>;

/// Batch-local index of `(table, g)` in the current seed's subgraph,
/// adding the node to the next frontier when it is new.
#[allow(clippy::too_many_arguments)]
fn visit<'a>(
    index: &mut HashMap<(&'a str, usize), usize>,
    nodes: &mut BTreeMap<String, BatchNodes>,
    next: &mut Frontier<'a>,
    table: &'a str,
    g: usize,
    seed: usize,
    hop: usize,
) -> usize {
    *index.entry((table, g)).or_insert_with(|| {
        let local = nodes.get_mut(table).expect("table").push(g, seed, hop);
        next.push((table, local, g));
        local
    })
}

fn pick<T: Copy>(cands: &[T], k: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    if cands.len() <= k {
        return cands.to_vec();
    }
    let mut idx = index::sample(rng, cands.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| cands[i]).collect()
}

/// Samples one disjoint subgraph per seed and stacks them.
pub fn sample_batch(
    reg: &RelationalEntityGraph,
    entity_table: &str,
    seeds: &[SeedEntity],
    cfg: &SamplerConfig,
) -> Result<BatchSubgraph> {
    cfg.validate()?;
    if !reg.nodes.contains_key(entity_table) {
        return Err(SampleError::UnknownTable(entity_table.to_string()));
    }
    let entity_key = reg.nodes.get_key_value(entity_table).expect("checked").0.as_str();
    let sg = &reg.schema_graph;
    let rels = node_relations(sg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut nodes: BTreeMap<String, BatchNodes> =
        reg.nodes.keys().map(|t| (t.clone(), BatchNodes::default())).collect();
    let mut edges: Vec<BatchEdges> = rels
        .iter()
        .map(|&relation| BatchEdges {
            relation,
            src: Vec::new(),
            dst: Vec::new(),
        })
        .collect();
    let mut paths: Vec<BatchPaths> = (0..reg.paths.len())
        .map(|path| BatchPaths {
            path,
            ..Default::default()
        })
        .collect();
    let mut counts = SampleCounts::default();
    let mut seed_nodes = Vec::with_capacity(seeds.len());

    for (si, seed) in seeds.iter().enumerate() {
        let global = reg.local_of(entity_table, seed.entity).ok_or_else(|| SampleError::UnknownSeed {
            table: entity_table.to_string(),
            entity: seed.entity,
        })?;
        let admissible = |table: &str, g: usize| {
            !cfg.causal || reg.nodes[table].times[g].is_none_or(|t| t <= seed.t_predict)
        };
        let mut index: HashMap<(&str, usize), usize> = HashMap::new();
        let mut frontier = Vec::new();
        let local = visit(&mut index, &mut nodes, &mut frontier, entity_key, global, si, 0);
        seed_nodes.push(local);

        for hop in 0..cfg.num_hops {
            let budget = cfg.hop_budget(hop);
            let mut next = Vec::new();
            for &(table, bl, g) in &frontier {
                for (ri, rel) in rels.iter().enumerate() {
                    if rel.dst_table(sg) != table {
                        continue;
                    }
                    let src_table = rel.src_table(sg);
                    let fpk = reg.fpk(rel.arc);
                    let cands: Vec<usize> = match rel.dir {
                        Direction::Forward => fpk
                            .referrers(g)
                            .iter()
                            .copied()
                            .filter(|&c| admissible(src_table, c))
                            .collect(),
                        Direction::Reverse => fpk
                            .target_of(g)
                            .filter(|&c| admissible(src_table, c))
                            .into_iter()
                            .collect(),
                    };
                    for c in pick(&cands, budget, &mut rng) {
                        let l = visit(&mut index, &mut nodes, &mut next, src_table, c, si, hop + 1);
                        edges[ri].src.push(l);
                        edges[ri].dst.push(bl);
                        counts.node_branch += 1;
                    }
                }
                for (pi, path) in reg.paths.iter().enumerate() {
                    let t = &path.triple;
                    if t.w != table {
                        continue;
                    }
                    let cands: Vec<_> = path
                        .ending_at(g)
                        .iter()
                        .copied()
                        .filter(|p| admissible(&t.v, p.v) && admissible(&t.u, p.u))
                        .collect();
                    for inst in pick(&cands, budget, &mut rng) {
                        let lu = visit(&mut index, &mut nodes, &mut next, &t.u, inst.u, si, hop + 1);
                        let lv = visit(&mut index, &mut nodes, &mut next, &t.v, inst.v, si, hop + 1);
                        paths[pi].u.push(lu);
                        paths[pi].v.push(lv);
                        paths[pi].w.push(bl);
                        counts.edge_branch += 1;
                    }
                }
            }
            frontier = next;
        }
    }

    Ok(BatchSubgraph {
        entity_table: entity_table.to_string(),
        seeds: seeds.to_vec(),
        seed_nodes,
        nodes,
        edges,
        paths,
        counts,
    })
}

/// Shuffles `0..n` with `seed` and cuts it into batches; the last batch
/// may be short.
pub fn make_epoch_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rdb::{ColumnKind, ColumnSpec, ForeignKeySpec, RelationalDatabase, Schema, TableSpec};
    use crate::schemagraph::{
        construct_reg, enumerate_edge_triples, Role, RoleAssignment, SchemaGraph, DEFAULT_PATH_CAP,
    };

    fn spec(name: &str, fk: Option<(&str, &str)>, timed: bool) -> TableSpec {
        let mut columns = vec![ColumnSpec {
            name: "id".into(),
            kind: ColumnKind::Integer,
            nullable: false,
        }];
        if let Some((c, _)) = fk {
            columns.push(ColumnSpec {
                name: c.into(),
                kind: ColumnKind::Integer,
                nullable: false,
            });
        }
        if timed {
            columns.push(ColumnSpec {
                name: "ts".into(),
                kind: ColumnKind::Datetime,
                nullable: false,
            });
        }
        TableSpec {
            name: name.into(),
            columns,
            primary_key: "id".into(),
            foreign_keys: fk
                .map(|(c, r)| ForeignKeySpec {
                    column: c.into(),
                    references: r.into(),
                })
                .into_iter()
                .collect(),
            time_column: timed.then(|| "ts".into()),
        }
    }

    /// a ← b ← c with `fan` rows of b per a and of c per b.
    fn chain(fan: usize, time_of_b: impl Fn(usize) -> i64) -> RelationalEntityGraph {
        let schema = Schema {
            tables: vec![
                spec("a", None, false),
                spec("b", Some(("a_id", "a")), true),
                spec("c", Some(("b_id", "b")), false),
            ],
        };
        let s = |v: Vec<String>| v;
        let mut rows = BTreeMap::new();
        rows.insert("a".to_string(), vec![s(vec!["1".into()])]);
        rows.insert(
            "b".to_string(),
            (0..fan).map(|i| vec![i.to_string(), "1".into(), time_of_b(i).to_string()]).collect(),
        );
        rows.insert(
            "c".to_string(),
            (0..fan * 3).map(|i| vec![i.to_string(), (i % fan).to_string()]).collect(),
        );
        let db = RelationalDatabase::from_raw(&schema, &rows).unwrap();
        let sg = SchemaGraph::from_schema(&db.schema());
        let roles = RoleAssignment::uniform(&sg, &enumerate_edge_triples(&sg), Role::Learn);
        construct_reg(&db, &roles, DEFAULT_PATH_CAP).unwrap()
    }

    fn seed(t: i64) -> SeedEntity {
        SeedEntity {
            entity: 1,
            t_predict: t,
        }
    }

    fn incoming(batch: &BatchSubgraph, reg: &RelationalEntityGraph, table: &str, local: usize) -> usize {
        let sg = &reg.schema_graph;
        batch
            .edges
            .iter()
            .filter(|e| e.relation.dst_table(sg) == table && e.relation.dir == Direction::Forward)
            .map(|e| e.dst.iter().filter(|&&d| d == local).count())
            .sum()
    }

    #[test]
    fn future_only_neighbour_is_not_sampled() {
        let reg = chain(1, |_| 100);
        let b = sample_batch(&reg, "a", &[seed(99)], &SamplerConfig::new(8, 2, 0)).unwrap();
        assert_eq!(b.num_nodes("b"), 0);
        assert_eq!(b.counts.node_branch, 0);
        let b = sample_batch(&reg, "a", &[seed(100)], &SamplerConfig::new(8, 2, 0)).unwrap();
        assert_eq!(b.num_nodes("b"), 1);
    }

    #[test]
    fn hop_budget_halves() {
        let reg = chain(200, |_| 0);
        let cfg = SamplerConfig::new(64, 2, 7);
        assert_eq!((cfg.hop_budget(0), cfg.hop_budget(1)), (64, 32));
        let b = sample_batch(&reg, "a", &[seed(10)], &cfg).unwrap();
        assert_eq!(incoming(&b, &reg, "a", 0), 64);
        for local in 0..b.num_nodes("b") {
            assert!(incoming(&b, &reg, "b", local) <= 32);
        }
        assert!(b.num_nodes("c") > 0);
    }

    #[test]
    fn small_neighbourhood_taken_whole() {
        let reg = chain(20, |i| i as i64);
        let b = sample_batch(&reg, "a", &[seed(9)], &SamplerConfig::new(64, 1, 3)).unwrap();
        let mut got: Vec<usize> = b.nodes["b"].global.clone();
        got.sort_unstable();
        let expected: Vec<usize> = (0..20).filter(|&i| reg.nodes["b"].times[i].unwrap() <= 9).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn causality_switch_admits_future() {
        let reg = chain(5, |_| 1000);
        let mut cfg = SamplerConfig::new(8, 1, 0);
        cfg.causal = false;
        let b = sample_batch(&reg, "a", &[seed(0)], &cfg).unwrap();
        assert_eq!(b.num_nodes("b"), 5);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let reg = chain(50, |_| 0);
        let cfg = SamplerConfig::new(8, 2, 11);
        let a = sample_batch(&reg, "a", &[seed(1)], &cfg).unwrap();
        assert_eq!(a, sample_batch(&reg, "a", &[seed(1)], &cfg).unwrap());
        let other = sample_batch(&reg, "a", &[seed(1)], &SamplerConfig::new(8, 2, 12)).unwrap();
        assert_ne!(a.nodes["b"].global, other.nodes["b"].global);
    }

    #[test]
    fn seeds_get_disjoint_copies() {
        let reg = chain(3, |_| 0);
        let b = sample_batch(&reg, "a", &[seed(1), seed(1)], &SamplerConfig::new(8, 1, 0)).unwrap();
        assert_eq!(b.seed_nodes, vec![0, 1]);
        assert_eq!(b.num_nodes("b"), 6);
        assert_eq!(b.nodes["b"].seed.iter().filter(|&&s| s == 1).count(), 3);
    }

    #[test]
    fn unknown_seed_rejected() {
        let reg = chain(3, |_| 0);
        let err = sample_batch(
            &reg,
            "a",
            &[SeedEntity {
                entity: 42,
                t_predict: 0,
            }],
            &SamplerConfig::new(8, 1, 0),
        )
        .unwrap_err();
        assert_eq!(
            err,
            SampleError::UnknownSeed {
                table: "a".into(),
                entity: 42
            }
        );
        assert!(SamplerConfig::new(0, 1, 0).validate().is_err());
        assert!(SamplerConfig::new(1, 0, 0).validate().is_err());
    }

    #[test]
    fn path_instances_respect_intermediate_time() {
        // c → b → a completion; b carries the time
        let reg = chain(10, |i| i as i64);
        assert_eq!(reg.paths.len(), 1);
        let b = sample_batch(&reg, "a", &[seed(4)], &SamplerConfig::new(64, 1, 0)).unwrap();
        let p = &b.paths[0];
        assert_eq!(p.len(), 5 * 3);
        for &v in &p.v {
            let g = b.nodes["b"].global[v];
            assert!(reg.nodes["b"].times[g].unwrap() <= 4);
        }
        assert_eq!(b.counts.edge_branch, 15);
    }

    #[test]
    fn sampling_is_close_to_uniform() {
        let reg = chain(10, |_| 0);
        let trials = 3000;
        let mut freq = [0usize; 10];
        for t in 0..trials {
            let b = sample_batch(&reg, "a", &[seed(0)], &SamplerConfig::new(3, 1, t)).unwrap();
            let sg = &reg.schema_graph;
            for e in b.edges.iter().filter(|e| e.relation.dst_table(sg) == "a") {
                for &l in &e.src {
                    freq[b.nodes["b"].global[l]] += 1;
                }
            }
        }
        let expected = trials as f64 * 3.0 / 10.0;
        let chi2: f64 = freq.iter().map(|&f| (f as f64 - expected).powi(2) / expected).sum();
        // 9 degrees of freedom, 99.9th percentile ≈ 27.9
        assert!(chi2 < 27.9, "chi2 {chi2}, {freq:?}");
    }

    #[test]
    fn epoch_batches() {
        let b = make_epoch_batches(10, 4, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, make_epoch_batches(10, 4, 1));
        let same = (0..100u64)
            .filter(|&s| make_epoch_batches(10, 10, s) == make_epoch_batches(10, 10, s + 1000))
            .count();
        assert!(same <= 1);
    }
}
