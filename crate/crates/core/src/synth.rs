//! Seeded synthetic databases with planted, analytically known structure.
//!
//! Every generator is a pure function of its parameters and seed and can
//! emit a standard bundle (tables plus task files).

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;
use crate::rdb::{
    write_bundle, write_task, ColumnKind, ColumnSpec, ForeignKeySpec, LabelRecord, RdbError, RelationalDatabase,
    Schema, SplitCuts, TableSpec, TaskSpec, TaskType,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Rdb(#[from] RdbError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Prediction times of the train, val and test entities; also the split
/// cuts of every generated task.
pub const SPLIT_TIMES: [i64; 3] = [1000, 2000, 3000];

fn cuts() -> SplitCuts {
    SplitCuts {
        train_end: SPLIT_TIMES[0],
        val_end: SPLIT_TIMES[1],
        test_end: SPLIT_TIMES[2],
    }
}

fn col(name: &str, kind: ColumnKind) -> ColumnSpec {
    ColumnSpec {
        name: name.into(),
        kind,
        nullable: false,
    }
}

fn fk(column: &str, references: &str) -> ForeignKeySpec {
    ForeignKeySpec {
        column: column.into(),
        references: references.into(),
    }
}

fn table(name: &str, columns: Vec<ColumnSpec>, fks: Vec<ForeignKeySpec>, time: Option<&str>) -> TableSpec {
    TableSpec {
        name: name.into(),
        primary_key: columns[0].name.clone(),
        columns,
        foreign_keys: fks,
        time_column: time.map(str::to_string),
    }
}

fn fmt(x: f64) -> String {
    format!("{x:?}")
}

type Rows = BTreeMap<String, Vec<Vec<String>>>;

/// Assigns entities `0..n` to train/val/test (60/20/20 after shuffling)
/// and returns per-split `(entity, t_predict)`.
fn split_entities(n: usize, keys: &[i64], rng: &mut ChaCha8Rng) -> [Vec<(i64, i64)>; 3] {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_train = n * 6 / 10;
    let n_val = n * 2 / 10;
    let mut out: [Vec<(i64, i64)>; 3] = Default::default();
    for (pos, &i) in order.iter().enumerate() {
        let s = if pos < n_train {
            0
        } else if pos < n_train + n_val {
            1
        } else {
            2
        };
        out[s].push((keys[i], SPLIT_TIMES[s]));
    }
    for v in &mut out {
        v.sort_unstable();
    }
    out
}

fn records(split: &[(i64, i64)], label: impl Fn(i64) -> f64) -> Vec<LabelRecord> {
    split
        .iter()
        .map(|&(entity, timestamp)| LabelRecord {
            entity,
            target: None,
            timestamp,
            label: label(entity),
        })
        .collect()
}

/// A database and, for task-bearing generators, its task.
#[derive(Debug, Clone)]
pub struct Generated {
    pub db: RelationalDatabase,
    pub task: Option<TaskSpec>,
}

impl Generated {
    /// Writes the bundle and, when present, the task files into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        write_bundle(&dir, &self.db)?;
        if let Some(t) = &self.task {
            write_task(&dir, t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoHopSpec {
    pub n_users: usize,
    pub n_products: usize,
    pub n_reviews: usize,
    /// 1 gives noiseless labels, 0 pure noise; each label is flipped with
    /// probability `(1 − signal) / 2`.
    pub signal: f64,
    pub seed: u64,
}

impl Default for TwoHopSpec {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_products: 200,
            n_reviews: 8000,
            signal: 1.0,
            seed: 0,
        }
    }
}

/// `user ← review → product`. A user's label is `1[mean q > 0.5]` over the
/// products of its reviews, where `q ~ U(0, 1)` is a product attribute.
/// Users and reviews carry only noise columns. Reviews are timestamped in
/// `[0, 1000)`, before every prediction time.
pub fn gen_twohop(spec: &TwoHopSpec) -> Result<Generated> {
    let TwoHopSpec {
        n_users,
        n_products,
        n_reviews,
        signal,
        seed,
    } = *spec;
    if n_users < 10 || n_products < 10 || n_reviews < n_users {
        return Err(SynthError::Params("need >= 10 users and products and a review per user".into()));
    }
    if !(0.0..=1.0).contains(&signal) {
        return Err(SynthError::Params("signal must be in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schema = twohop_schema();
    let mut rows = Rows::new();
    rows.insert(
        "user".into(),
        (0..n_users).map(|i| vec![i.to_string(), fmt(rng.gen_range(-1.0..1.0))]).collect(),
    );
    let q: Vec<f64> = (0..n_products).map(|_| rng.gen_range(0.0..1.0)).collect();
    rows.insert(
        "product".into(),
        q.iter()
            .enumerate()
            .map(|(i, &q)| vec![i.to_string(), fmt(q), fmt(rng.gen_range(-1.0..1.0))])
            .collect(),
    );
    let mut reviews = Vec::with_capacity(n_reviews);
    for r in 0..n_reviews {
        let user = if r < n_users { r } else { rng.gen_range(0..n_users) };
        let product = rng.gen_range(0..n_products);
        let ts = rng.gen_range(0..SPLIT_TIMES[0]);
        reviews.push((user, product));
        rows.entry("review".into()).or_default().push(vec![
            r.to_string(),
            user.to_string(),
            product.to_string(),
            fmt(rng.gen_range(-1.0..1.0)),
            ts.to_string(),
        ]);
    }
    let labels = twohop_labels(n_users, &reviews, &q);
    let flip = (1.0 - signal) / 2.0;
    let noisy: Vec<f64> = labels
        .iter()
        .map(|&y| if rng.gen_bool(flip) { 1.0 - y } else { y })
        .collect();
    let db = RelationalDatabase::from_raw(&schema, &rows)?;
    let keys: Vec<i64> = (0..n_users as i64).collect();
    let [tr, va, te] = split_entities(n_users, &keys, &mut rng);
    let label = |e: i64| noisy[e as usize];
    let task = TaskSpec {
        name: "twohop".into(),
        task_type: TaskType::Classification,
        entity_table: "user".into(),
        target_table: None,
        split: cuts(),
        eval_k: 10,
        train: records(&tr, label),
        val: records(&va, label),
        test: records(&te, label),
    };
    Ok(Generated { db, task: Some(task) })
}

fn twohop_schema() -> Schema {
    use ColumnKind::*;
    Schema {
        tables: vec![
            table("user", vec![col("user_id", Integer), col("noise", Real)], vec![], None),
            table(
                "product",
                vec![col("product_id", Integer), col("q", Real), col("noise", Real)],
                vec![],
                None,
            ),
            table(
                "review",
                vec![
                    col("review_id", Integer),
                    col("user_id", Integer),
                    col("product_id", Integer),
                    col("noise", Real),
                    col("ts", Datetime),
                ],
                vec![fk("user_id", "user"), fk("product_id", "product")],
                Some("ts"),
            ),
        ],
    }
}

/// Noiseless two-hop labels from `(user, product)` review pairs.
pub fn twohop_labels(n_users: usize, reviews: &[(usize, usize)], q: &[f64]) -> Vec<f64> {
    let mut sum = vec![0.0; n_users];
    let mut count = vec![0usize; n_users];
    for &(u, p) in reviews {
        sum[u] += q[p];
        count[u] += 1;
    }
    (0..n_users)
        .map(|u| f64::from(count[u] > 0 && sum[u] / count[u] as f64 > 0.5))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubspaceSpec {
    /// Number of child rows; there are `n / 2` parents (at least 1).
    pub n: usize,
    pub channels: usize,
    pub d_true: usize,
    /// Half-width of the uniform noise added to each difference.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SubspaceSpec {
    fn default() -> Self {
        Self {
            n: 400,
            channels: 8,
            d_true: 2,
            sigma: 0.0,
            seed: 0,
        }
    }
}

/// The planted affine subspace `shift + span(basis)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSubspace {
    pub shift: Vec<f64>,
    /// `channels × d_true`, row-major.
    pub basis: Vec<f64>,
}

/// `child → parent` with `channels` real columns `x0..` each. For every
/// child `i` with parent `j`, `x_j − x_i = shift + basis·z + noise`, with
/// `z ~ U(−1, 1)^d_true` and noise `~ U(−σ, σ)`.
pub fn gen_subspace(spec: &SubspaceSpec) -> Result<(Generated, PlantedSubspace)> {
    let SubspaceSpec {
        n,
        channels: c,
        d_true,
        sigma,
        seed,
    } = *spec;
    if d_true == 0 || d_true >= c || n == 0 {
        return Err(SynthError::Params("need 0 < d_true < channels and n > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let basis: Vec<f64> = (0..c * d_true).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n_parents = (n / 2).max(1);
    let xcols = |first: &str| {
        let mut cols = vec![col(first, ColumnKind::Integer)];
        cols.extend((0..c).map(|k| col(&format!("x{k}"), ColumnKind::Real)));
        cols
    };
    let mut pcols = xcols("parent_id");
    let mut ccols = xcols("child_id");
    ccols.insert(1, col("parent_id", ColumnKind::Integer));
    pcols.truncate(c + 1);
    let schema = Schema {
        tables: vec![
            table("parent", pcols, vec![], None),
            table("child", ccols, vec![fk("parent_id", "parent")], None),
        ],
    };
    let parents: Vec<Vec<f64>> = (0..n_parents)
        .map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut rows = Rows::new();
    rows.insert(
        "parent".into(),
        parents
            .iter()
            .enumerate()
            .map(|(i, x)| std::iter::once(i.to_string()).chain(x.iter().map(|&v| fmt(v))).collect())
            .collect(),
    );
    let mut children = Vec::with_capacity(n);
    for i in 0..n {
        let p = rng.gen_range(0..n_parents);
        let z: Vec<f64> = (0..d_true).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut row = vec![i.to_string(), p.to_string()];
        for k in 0..c {
            let diff = shift[k]
                + (0..d_true).map(|q| basis[k * d_true + q] * z[q]).sum::<f64>()
                + if sigma > 0.0 { rng.gen_range(-sigma..sigma) } else { 0.0 };
            row.push(fmt(parents[p][k] - diff));
        }
        children.push(row);
    }
    rows.insert("child".into(), children);
    let db = RelationalDatabase::from_raw(&schema, &rows)?;
    Ok((Generated { db, task: None }, PlantedSubspace { shift, basis }))
}

/// Raw real attributes of both ends of every non-null key of foreign key
/// `fk` in `source`, row-aligned, plus the referenced row index of each
/// pair. Used as identity-encoded embeddings.
pub fn linked_attributes(db: &RelationalDatabase, source: &str, fk: usize, columns: &[&str]) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let missing = |what: String| SynthError::Params(format!("unknown {what}"));
    let src = db.table(source).ok_or_else(|| missing(format!("table {source}")))?;
    let fks = &src.spec().foreign_keys;
    let target = &fks.get(fk).ok_or_else(|| missing(format!("foreign key {fk} of {source}")))?.references;
    let dst = db.table(target).ok_or_else(|| missing(format!("table {target}")))?;
    let cols = |t: &crate::rdb::Table| -> Result<Vec<usize>> {
        columns
            .iter()
            .map(|c| t.spec().column_index(c).ok_or_else(|| missing(format!("column {c} of {}", t.name()))))
            .collect()
    };
    let (cs, cd) = (cols(src)?, cols(dst)?);
    let (mut hi, mut hj, mut keys) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..src.len() {
        let Some(j) = src.fk_value(i, fk).and_then(|k| dst.row_of(k)) else { continue };
        hi.extend(cs.iter().map(|&c| src.row(i)[c].as_f64().unwrap_or(0.0)));
        hj.extend(cd.iter().map(|&c| dst.row(j)[c].as_f64().unwrap_or(0.0)));
        keys.push(j);
    }
    let n = keys.len();
    let c = columns.len();
    let tensor = |v| Tensor::new(vec![n, c], v).expect("shape matches data");
    Ok((tensor(hi), tensor(hj), keys))
}

/// Names `x0..x{channels-1}` of the attribute columns of [`gen_subspace`].
pub fn subspace_columns(channels: usize) -> Vec<String> {
    (0..channels).map(|k| format!("x{k}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FutureLeakSpec {
    pub n: usize,
    /// Past events per customer, carrying no label information.
    pub past_events: usize,
    pub seed: u64,
}

impl Default for FutureLeakSpec {
    fn default() -> Self {
        Self {
            n: 1000,
            past_events: 3,
            seed: 0,
        }
    }
}

/// Timestamp bounds of the label-bearing events, after every prediction
/// time.
pub const LEAK_WINDOW: (i64, i64) = (4000, 5000);

/// `customer ← event`. Labels are random; every customer has one event
/// after every prediction time whose `value` is `±U(0.5, 1)` with the sign
/// of the label, plus past events with small uninformative values.
pub fn gen_future_leak(spec: &FutureLeakSpec) -> Result<Generated> {
    let FutureLeakSpec { n, past_events, seed } = *spec;
    if n < 10 {
        return Err(SynthError::Params("need at least 10 customers".into()));
    }
    use ColumnKind::*;
    let schema = Schema {
        tables: vec![
            table("customer", vec![col("customer_id", Integer), col("noise", Real)], vec![], None),
            table(
                "event",
                vec![
                    col("event_id", Integer),
                    col("customer_id", Integer),
                    col("value", Real),
                    col("ts", Datetime),
                ],
                vec![fk("customer_id", "customer")],
                Some("ts"),
            ),
        ],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
    let mut rows = Rows::new();
    rows.insert(
        "customer".into(),
        (0..n).map(|i| vec![i.to_string(), fmt(rng.gen_range(-1.0..1.0))]).collect(),
    );
    let mut events = Vec::new();
    let mut id = 0usize;
    for (c, &y) in labels.iter().enumerate() {
        for _ in 0..past_events {
            events.push(vec![
                id.to_string(),
                c.to_string(),
                fmt(rng.gen_range(-0.2..0.2)),
                rng.gen_range(0..SPLIT_TIMES[0]).to_string(),
            ]);
            id += 1;
        }
        let sign = if y > 0.5 { 1.0 } else { -1.0 };
        events.push(vec![
            id.to_string(),
            c.to_string(),
            fmt(sign * rng.gen_range(0.5..1.0)),
            rng.gen_range(LEAK_WINDOW.0..LEAK_WINDOW.1).to_string(),
        ]);
        id += 1;
    }
    rows.insert("event".into(), events);
    let db = RelationalDatabase::from_raw(&schema, &rows)?;
    let keys: Vec<i64> = (0..n as i64).collect();
    let [tr, va, te] = split_entities(n, &keys, &mut rng);
    let label = |e: i64| labels[e as usize];
    let task = TaskSpec {
        name: "future-leak".into(),
        task_type: TaskType::Classification,
        entity_table: "customer".into(),
        target_table: None,
        split: cuts(),
        eval_k: 10,
        train: records(&tr, label),
        val: records(&va, label),
        test: records(&te, label),
    };
    Ok(Generated { db, task: Some(task) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainSpec {
    /// Rows of the target table `circuit`.
    pub n_w: usize,
    /// Rows of the mediating table `race`.
    pub n_v: usize,
    /// Rows of the source table `standing`.
    pub n_u: usize,
    /// Constant mediator gate; uniform in `[0, 1]` per row when unset.
    pub gate: Option<f64>,
    pub seed: u64,
}

impl Default for ChainSpec {
    fn default() -> Self {
        Self {
            n_w: 200,
            n_v: 600,
            n_u: 2400,
            gate: None,
            seed: 0,
        }
    }
}

/// `standing → race → circuit`. The regression target of a circuit is
/// the mean of `standing.a · race.g` over its `(standing, race)` paths
/// (zero without paths).
pub fn gen_completion_chain(spec: &ChainSpec) -> Result<Generated> {
    let ChainSpec { n_w, n_v, n_u, gate, seed } = *spec;
    if n_w < 10 || n_v < n_w || n_u < n_v {
        return Err(SynthError::Params("need 10 <= n_w <= n_v <= n_u".into()));
    }
    use ColumnKind::*;
    let schema = Schema {
        tables: vec![
            table("circuit", vec![col("circuit_id", Integer), col("noise", Real)], vec![], None),
            table(
                "race",
                vec![col("race_id", Integer), col("circuit_id", Integer), col("g", Real)],
                vec![fk("circuit_id", "circuit")],
                None,
            ),
            table(
                "standing",
                vec![col("standing_id", Integer), col("race_id", Integer), col("a", Real)],
                vec![fk("race_id", "race")],
                None,
            ),
        ],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Rows::new();
    rows.insert(
        "circuit".into(),
        (0..n_w).map(|i| vec![i.to_string(), fmt(rng.gen_range(-1.0..1.0))]).collect(),
    );
    let race: Vec<(usize, f64)> = (0..n_v)
        .map(|i| {
            let w = if i < n_w { i } else { rng.gen_range(0..n_w) };
            (w, gate.unwrap_or_else(|| rng.gen_range(0.0..1.0)))
        })
        .collect();
    rows.insert(
        "race".into(),
        race.iter().enumerate().map(|(i, &(w, g))| vec![i.to_string(), w.to_string(), fmt(g)]).collect(),
    );
    let standing: Vec<(usize, f64)> = (0..n_u)
        .map(|i| (if i < n_v { i } else { rng.gen_range(0..n_v) }, rng.gen_range(-1.0..1.0)))
        .collect();
    rows.insert(
        "standing".into(),
        standing.iter().enumerate().map(|(i, &(v, a))| vec![i.to_string(), v.to_string(), fmt(a)]).collect(),
    );
    let targets = chain_targets(n_w, &race, &standing);
    let db = RelationalDatabase::from_raw(&schema, &rows)?;
    let keys: Vec<i64> = (0..n_w as i64).collect();
    let [tr, va, te] = split_entities(n_w, &keys, &mut rng);
    let label = |e: i64| targets[e as usize];
    let task = TaskSpec {
        name: "completion-chain".into(),
        task_type: TaskType::Regression,
        entity_table: "circuit".into(),
        target_table: None,
        split: cuts(),
        eval_k: 10,
        train: records(&tr, label),
        val: records(&va, label),
        test: records(&te, label),
    };
    Ok(Generated { db, task: Some(task) })
}

/// Per-circuit mean of `a · g` over paths, from `(circuit, g)` races and
/// `(race, a)` standings.
pub fn chain_targets(n_w: usize, race: &[(usize, f64)], standing: &[(usize, f64)]) -> Vec<f64> {
    let mut sum = vec![0.0; n_w];
    let mut count = vec![0usize; n_w];
    for &(v, a) in standing {
        let (w, g) = race[v];
        sum[w] += a * g;
        count[w] += 1;
    }
    (0..n_w).map(|w| if count[w] > 0 { sum[w] / count[w] as f64 } else { 0.0 }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkSpec {
    pub n_users: usize,
    pub n_items: usize,
    /// Number of item groups; users interact only within their group.
    pub groups: usize,
    pub past_per_user: usize,
    pub seed: u64,
}

impl Default for LinkSpec {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 60,
            groups: 6,
            past_per_user: 4,
            seed: 0,
        }
    }
}

/// `user ← purchase → item`, items in groups. Each user buys from one
/// group before the first prediction time; the task asks for the items of
/// that group the user buys at its prediction time.
pub fn gen_link(spec: &LinkSpec) -> Result<Generated> {
    let LinkSpec {
        n_users,
        n_items,
        groups,
        past_per_user,
        seed,
    } = *spec;
    if n_users < 10 || groups == 0 || n_items < 2 * groups || past_per_user == 0 {
        return Err(SynthError::Params("need >= 10 users and >= 2 items per group".into()));
    }
    use ColumnKind::*;
    let schema = Schema {
        tables: vec![
            table("user", vec![col("user_id", Integer), col("noise", Real)], vec![], None),
            table("item", vec![col("item_id", Integer), col("noise", Real)], vec![], None),
            table(
                "purchase",
                vec![
                    col("purchase_id", Integer),
                    col("user_id", Integer),
                    col("item_id", Integer),
                    col("ts", Datetime),
                ],
                vec![fk("user_id", "user"), fk("item_id", "item")],
                Some("ts"),
            ),
        ],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let group_of = |item: usize| item % groups;
    let items_in = |g: usize| (0..n_items).filter(move |&i| group_of(i) == g);
    let user_group: Vec<usize> = (0..n_users).map(|_| rng.gen_range(0..groups)).collect();
    let mut rows = Rows::new();
    rows.insert(
        "user".into(),
        (0..n_users).map(|i| vec![i.to_string(), fmt(rng.gen_range(-1.0..1.0))]).collect(),
    );
    rows.insert(
        "item".into(),
        (0..n_items).map(|i| vec![i.to_string(), fmt(rng.gen_range(-1.0..1.0))]).collect(),
    );
    let mut purchases = Vec::new();
    for (u, &g) in user_group.iter().enumerate() {
        let pool: Vec<usize> = items_in(g).collect();
        for _ in 0..past_per_user {
            purchases.push(vec![
                purchases.len().to_string(),
                u.to_string(),
                pool[rng.gen_range(0..pool.len())].to_string(),
                rng.gen_range(0..SPLIT_TIMES[0]).to_string(),
            ]);
        }
    }
    rows.insert("purchase".into(), purchases);
    let db = RelationalDatabase::from_raw(&schema, &rows)?;
    let keys: Vec<i64> = (0..n_users as i64).collect();
    let splits = split_entities(n_users, &keys, &mut rng);
    let mut recs: [Vec<LabelRecord>; 3] = Default::default();
    for (s, split) in splits.iter().enumerate() {
        for &(u, t) in split {
            let pool: Vec<usize> = items_in(user_group[u as usize]).collect();
            for _ in 0..2 {
                recs[s].push(LabelRecord {
                    entity: u,
                    target: Some(pool[rng.gen_range(0..pool.len())] as i64),
                    timestamp: t,
                    label: 1.0,
                });
            }
        }
    }
    let [train, val, test] = recs;
    let task = TaskSpec {
        name: "link".into(),
        task_type: TaskType::LinkPrediction,
        entity_table: "user".into(),
        target_table: Some("item".into()),
        split: cuts(),
        eval_k: 5,
        train,
        val,
        test,
    };
    Ok(Generated { db, task: Some(task) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomSpec {
    pub max_tables: usize,
    pub max_rows: usize,
    pub seed: u64,
}

impl Default for RandomSpec {
    fn default() -> Self {
        Self {
            max_tables: 5,
            max_rows: 25,
            seed: 0,
        }
    }
}

/// Random schema and contents: 2 to `max_tables` tables, foreign keys to
/// earlier tables (occasionally to the table itself), nullable keys and
/// attributes, every column kind, possibly empty tables.
pub fn gen_random(spec: &RandomSpec) -> Result<Generated> {
    let RandomSpec { max_tables, max_rows, seed } = *spec;
    if max_tables < 2 {
        return Err(SynthError::Params("need at least 2 tables".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tables = rng.gen_range(2..=max_tables);
    let kinds = [ColumnKind::Integer, ColumnKind::Real, ColumnKind::Categorical, ColumnKind::Datetime];
    let mut specs = Vec::new();
    let mut keys_of: Vec<Vec<i64>> = Vec::new();
    let mut rows = Rows::new();
    for t in 0..n_tables {
        let name = format!("t{t}");
        let mut columns = vec![col("id", ColumnKind::Integer)];
        let mut fks = Vec::new();
        let n_fk = if t == 0 { 0 } else { rng.gen_range(0..=3.min(t + 1)) };
        let mut fk_targets = Vec::new();
        for k in 0..n_fk {
            let target = if rng.gen_bool(0.15) { t } else { rng.gen_range(0..t) };
            let cname = format!("fk{k}");
            columns.push(ColumnSpec {
                name: cname.clone(),
                kind: ColumnKind::Integer,
                nullable: target == t || rng.gen_bool(0.3),
            });
            fks.push(fk(&cname, &format!("t{target}")));
            fk_targets.push(target);
        }
        let n_attr = rng.gen_range(0..4);
        for a in 0..n_attr {
            columns.push(ColumnSpec {
                name: format!("a{a}"),
                kind: kinds[rng.gen_range(0..kinds.len())],
                nullable: rng.gen_bool(0.3),
            });
        }
        let time = rng.gen_bool(0.5).then(|| {
            columns.push(col("ts", ColumnKind::Datetime));
            "ts"
        });
        let n_rows = if rng.gen_bool(0.1) { 0 } else { rng.gen_range(1..=max_rows) };
        let mut keys: Vec<i64> = (0..n_rows as i64).map(|i| i * 3 + rng.gen_range(0..3)).collect();
        keys.reverse();
        let mut out = Vec::with_capacity(n_rows);
        let mut kept: Vec<i64> = Vec::new();
        for &key in &keys {
            let mut row = vec![key.to_string()];
            for (k, &target) in fk_targets.iter().enumerate() {
                let nullable = columns[1 + k].nullable;
                let pool: &[i64] = if target == t { &kept } else { &keys_of[target] };
                if pool.is_empty() || (nullable && rng.gen_bool(0.2)) {
                    if nullable {
                        row.push(String::new());
                        continue;
                    }
                    // required key with nothing to point at: drop the row
                    row.clear();
                    break;
                }
                row.push(pool[rng.gen_range(0..pool.len())].to_string());
            }
            if row.is_empty() {
                continue;
            }
            for c in &columns[1 + fk_targets.len()..] {
                if c.nullable && rng.gen_bool(0.2) {
                    row.push(String::new());
                    continue;
                }
                row.push(match c.kind {
                    ColumnKind::Integer => rng.gen_range(-50..50).to_string(),
                    ColumnKind::Real => fmt(f64::from(rng.gen_range(-400..400)) / 8.0),
                    ColumnKind::Categorical => format!("c{}", rng.gen_range(0..4)),
                    ColumnKind::Datetime => rng.gen_range(0..10_000).to_string(),
                });
            }
            out.push(row);
            kept.push(key);
        }
        keys_of.push(kept);
        rows.insert(name.clone(), out);
        specs.push(TableSpec {
            name,
            columns,
            primary_key: "id".into(),
            foreign_keys: fks,
            time_column: time.map(str::to_string),
        });
    }
    let db = RelationalDatabase::from_raw(&Schema { tables: specs }, &rows)?;
    Ok(Generated { db, task: None })
}

/// Generator name plus parameters, as accepted on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case")]
pub enum SynthSpec {
    Twohop(TwoHopSpec),
    Subspace(SubspaceSpec),
    FutureLeak(FutureLeakSpec),
    CompletionChain(ChainSpec),
    Link(LinkSpec),
    Random(RandomSpec),
}

impl SynthSpec {
    pub const NAMES: [&'static str; 6] = ["twohop", "subspace", "future-leak", "completion-chain", "link", "random"];

    pub fn generate(&self) -> Result<Generated> {
        match self {
            SynthSpec::Twohop(s) => gen_twohop(s),
            SynthSpec::Subspace(s) => gen_subspace(s).map(|(g, _)| g),
            SynthSpec::FutureLeak(s) => gen_future_leak(s),
            SynthSpec::CompletionChain(s) => gen_completion_chain(s),
            SynthSpec::Link(s) => gen_link(s),
            SynthSpec::Random(s) => gen_random(s),
        }
    }
}
