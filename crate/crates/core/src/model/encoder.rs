//! Raw row features to layer-0 embeddings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::rdb::{ColumnKind, Value};
use crate::sampler::BatchSubgraph;
use crate::schemagraph::RelationalEntityGraph;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

use super::{ModelError, ParamFactory, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericColumn {
    /// Position in the node's attribute vector.
    pub slot: usize,
    pub mean: f64,
    pub std: f64,
    /// Nullable columns get an extra presence-mask input.
    pub masked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalColumn {
    pub slot: usize,
    /// Vocabulary size including the reserved unknown id 0.
    pub vocab: usize,
}

/// Per-table encoding layout with statistics from the training window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableStats {
    pub numeric: Vec<NumericColumn>,
    pub categorical: Vec<CategoricalColumn>,
    /// Scale of the time-to-prediction feature; `None` for untimed tables.
    pub time_scale: Option<f64>,
}

impl TableStats {
    pub fn numeric_width(&self) -> usize {
        self.numeric.iter().map(|c| 1 + usize::from(c.masked)).sum::<usize>()
            + usize::from(self.time_scale.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub tables: BTreeMap<String, TableStats>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 1.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 0.0 && std.is_finite() { std } else { 1.0 })
}

impl FeatureStats {
    /// Standardisation statistics over rows with timestamp `<= train_end`
    /// (all rows for untimed tables, or when no row qualifies).
    pub fn compute(reg: &RelationalEntityGraph, train_end: i64) -> Self {
        let mut tables = BTreeMap::new();
        for (name, ns) in &reg.nodes {
            let template = reg.template(name);
            let spec = template.spec();
            let time_col = template.time_column();
            let mut rows: Vec<usize> = (0..ns.len)
                .filter(|&i| ns.times[i].is_none_or(|t| t <= train_end))
                .collect();
            if rows.is_empty() {
                rows = (0..ns.len).collect();
            }
            let mut numeric = Vec::new();
            let mut categorical = Vec::new();
            for (slot, &col) in ns.attr_columns.iter().enumerate() {
                if Some(col) == time_col {
                    continue;
                }
                let c = &spec.columns[col];
                match c.kind {
                    ColumnKind::Categorical => categorical.push(CategoricalColumn {
                        slot,
                        vocab: template.vocab(col).map_or(1, |v| v.size()),
                    }),
                    _ => {
                        let xs: Vec<f64> = rows
                            .iter()
                            .filter_map(|&i| reg.attrs(name, i)[slot].as_f64())
                            .collect();
                        let (mean, std) = mean_std(&xs);
                        numeric.push(NumericColumn {
                            slot,
                            mean,
                            std,
                            masked: c.nullable,
                        });
                    }
                }
            }
            let time_scale = time_col.map(|_| {
                let ts: Vec<f64> = ns.times.iter().flatten().map(|&t| t as f64).collect();
                mean_std(&ts).1
            });
            tables.insert(
                name.clone(),
                TableStats {
                    numeric,
                    categorical,
                    time_scale,
                },
            );
        }
        Self { tables }
    }
}

/// Standardised numeric features and categorical ids for every node.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    tables: BTreeMap<String, CachedTable>,
}

#[derive(Debug, Clone)]
struct CachedTable {
    /// Row-major `[n, numeric_width - time]` without the time feature.
    numeric: Vec<f64>,
    width: usize,
    cats: Vec<Vec<usize>>,
    times: Vec<Option<i64>>,
}

impl FeatureCache {
    pub fn build(reg: &RelationalEntityGraph, stats: &FeatureStats) -> Result<Self> {
        let mut tables = BTreeMap::new();
        for (name, ns) in &reg.nodes {
            let st = stats
                .tables
                .get(name)
                .ok_or_else(|| ModelError::Incompatible(format!("no feature statistics for table {name}")))?;
            let width = st.numeric_width() - usize::from(st.time_scale.is_some());
            let mut numeric = Vec::with_capacity(ns.len * width);
            let mut cats = vec![Vec::with_capacity(ns.len); st.categorical.len()];
            for i in 0..ns.len {
                let attrs = reg.attrs(name, i);
                for c in &st.numeric {
                    match attrs.get(c.slot).and_then(Value::as_f64) {
                        Some(x) => {
                            numeric.push((x - c.mean) / c.std);
                            if c.masked {
                                numeric.push(0.0);
                            }
                        }
                        None => {
                            numeric.push(0.0);
                            if c.masked {
                                numeric.push(1.0);
                            }
                        }
                    }
                }
                for (k, c) in st.categorical.iter().enumerate() {
                    let id = match attrs.get(c.slot) {
                        Some(Value::Cat(id)) if (*id as usize) < c.vocab => *id as usize,
                        _ => 0,
                    };
                    cats[k].push(id);
                }
            }
            tables.insert(
                name.clone(),
                CachedTable {
                    numeric,
                    width,
                    cats,
                    times: ns.times.clone(),
                },
            );
        }
        Ok(Self { tables })
    }

    /// Numeric input rows for the given nodes, including the scaled
    /// time-to-prediction feature.
    pub fn numeric_rows(&self, table: &str, stats: &TableStats, global: &[usize], t_predict: &[i64]) -> Tensor {
        let ct = &self.tables[table];
        let width = stats.numeric_width();
        let mut data = Vec::with_capacity(global.len() * width);
        for (k, &g) in global.iter().enumerate() {
            data.extend_from_slice(&ct.numeric[g * ct.width..(g + 1) * ct.width]);
            if let Some(scale) = stats.time_scale {
                data.push(ct.times[g].map_or(0.0, |t| (t_predict[k] - t) as f64 / scale));
            }
        }
        Tensor::new(vec![global.len(), width], data).expect("consistent width")
    }

    pub fn category_ids(&self, table: &str, column: usize, global: &[usize]) -> Vec<usize> {
        let ids = &self.tables[table].cats[column];
        global.iter().map(|&g| ids[g]).collect()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct TableEncoder {
    pub(crate) proj: Option<ParamId>,
    pub(crate) bias: ParamId,
    pub(crate) embeddings: Vec<ParamId>,
}

pub(crate) fn build_encoders(
    stats: &FeatureStats,
    channels: usize,
    cat_dim: usize,
    pf: &mut ParamFactory<'_>,
) -> BTreeMap<String, TableEncoder> {
    stats
        .tables
        .iter()
        .map(|(name, st)| {
            let input = st.numeric_width() + st.categorical.len() * cat_dim;
            let proj = (input > 0).then(|| pf.glorot(&format!("enc.{name}.w"), &[input, channels], input));
            let bias = pf.zeros(&format!("enc.{name}.b"), &[channels]);
            let embeddings = st
                .categorical
                .iter()
                .enumerate()
                .map(|(k, c)| pf.glorot(&format!("enc.{name}.cat{k}"), &[c.vocab, cat_dim], c.vocab))
                .collect();
            (
                name.clone(),
                TableEncoder {
                    proj,
                    bias,
                    embeddings,
                },
            )
        })
        .collect()
}

/// Layer-0 embeddings for every table with nodes in the batch.
pub(crate) fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    encoders: &BTreeMap<String, TableEncoder>,
    stats: &FeatureStats,
    cache: &FeatureCache,
    batch: &BatchSubgraph,
    channels: usize,
) -> Result<BTreeMap<String, Var>> {
    let mut out = BTreeMap::new();
    for (name, nodes) in &batch.nodes {
        if nodes.is_empty() {
            continue;
        }
        let st = &stats.tables[name];
        let enc = &encoders[name];
        let t_predict: Vec<i64> = nodes.seed.iter().map(|&s| batch.seeds[s].t_predict).collect();
        let mut parts = Vec::new();
        if st.numeric_width() > 0 {
            parts.push(tape.leaf(cache.numeric_rows(name, st, &nodes.global, &t_predict)));
        }
        for (k, &emb) in enc.embeddings.iter().enumerate() {
            let table = tape.param(store, emb);
            let ids = cache.category_ids(name, k, &nodes.global);
            parts.push(tape.embedding(table, &ids)?);
        }
        let base = match enc.proj {
            Some(w) => {
                let x = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 1)? };
                let w = tape.param(store, w);
                tape.matmul(x, w)?
            }
            None => tape.leaf(Tensor::zeros(&[nodes.len(), channels])),
        };
        let b = tape.param(store, enc.bias);
        out.insert(name.clone(), tape.add_row(base, b)?);
    }
    Ok(out)
}
