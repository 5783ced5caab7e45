//! Alternating optimisation of the gated model and the FD regulariser,
//! evaluation, early stopping and structure export.
//!
//! Each epoch runs phase A (model trained on task loss plus FD loss with
//! the regulariser frozen) and then phase B (regulariser trained on the FD
//! loss with the model frozen).

pub mod metrics;
mod checkpoint;
mod structure;

pub use checkpoint::{load_checkpoint, read_gate_file, CheckpointMeta, GateFile, LoadedCheckpoint};
pub use structure::{StructureEntry, StructureReport};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fdreg::{FdConfig, FdError, FdRegularizer, FdRelationStats};
use crate::model::{link_score, FeatureCache, FeatureStats, ForwardOutput, GatedModel, GateState, ModelConfig, ModelError, RoleMode};
use crate::rdb::{RelationalDatabase, Split, TaskSpec, TaskType};
use crate::sampler::{make_epoch_batches, sample_batch, BatchSubgraph, SampleError, SamplerConfig, SeedEntity};
use crate::schemagraph::{construct_reg, enumerate_edge_triples, GraphError, RelationalEntityGraph, DEFAULT_PATH_CAP};
use crate::tensor::{Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

use metrics::{map_at_k, mean_absolute_error, roc_auc, RankingQuery};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fd(#[from] FdError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("training diverged in epoch {epoch}, phase {phase}, batch {batch}: loss {loss}")]
    Divergence {
        epoch: usize,
        phase: Phase,
        batch: usize,
        loss: f64,
    },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("invalid training config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Model update with the regulariser frozen.
    A,
    /// Regulariser update with the model frozen.
    B,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::A => "A",
            Phase::B => "B",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Sampling budget `B`; hop `i` keeps `⌊B / 2^i⌋` neighbours.
    pub neighbor_samples: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub roles: RoleMode,
    pub fd: FdConfig,
    /// Compute the FD terms at all (with zero weights they still run).
    pub fd_enabled: bool,
    /// Negatives per positive for link prediction.
    pub link_negatives: usize,
    /// Temporal admissibility in the sampler; off only for leak checks.
    pub causal: bool,
    pub path_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 512,
            lr: 1e-3,
            neighbor_samples: 128,
            patience: 10,
            seed: 0,
            roles: RoleMode::Learn,
            fd: FdConfig::default(),
            fd_enabled: true,
            link_negatives: 10,
            causal: true,
            path_cap: DEFAULT_PATH_CAP,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.neighbor_samples == 0 {
            return bad("neighbor_samples must be positive");
        }
        if self.link_negatives == 0 {
            return bad("link_negatives must be positive");
        }
        Ok(())
    }
}

/// Graph, feature statistics and cached features of one database.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub reg: RelationalEntityGraph,
    pub stats: FeatureStats,
    pub cache: FeatureCache,
}

impl Workspace {
    /// Builds the graph for `roles`; statistics come from the training
    /// window unless given.
    pub fn new(
        db: &RelationalDatabase,
        task: &TaskSpec,
        roles: RoleMode,
        path_cap: usize,
        stats: Option<FeatureStats>,
    ) -> Result<Self> {
        let sg = crate::schemagraph::build_schema_graph(db);
        let assignment = roles.assignment(&sg, &enumerate_edge_triples(&sg));
        let reg = construct_reg(db, &assignment, path_cap)?;
        let stats = stats.unwrap_or_else(|| FeatureStats::compute(&reg, task.split.train_end));
        let cache = FeatureCache::build(&reg, &stats)?;
        if !reg.nodes.contains_key(&task.entity_table) {
            return Err(TrainError::Config(format!(
                "entity table {} is stored as edges under this role assignment",
                task.entity_table
            )));
        }
        Ok(Self { reg, stats, cache })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    RocAuc,
    Mae,
    MapAtK,
}

impl MetricKind {
    pub fn for_task(t: TaskType) -> Self {
        match t {
            TaskType::Classification => MetricKind::RocAuc,
            TaskType::Regression => MetricKind::Mae,
            TaskType::LinkPrediction => MetricKind::MapAtK,
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != MetricKind::Mae
    }

    fn improves(self, new: f64, old: f64) -> bool {
        if self.higher_is_better() {
            new > old
        } else {
            new < old
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub split: Split,
    pub metric: MetricKind,
    /// `None` when undefined (single-class AUC or no records).
    pub value: Option<f64>,
    pub records: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub batches: usize,
    pub l_task: Option<f64>,
    pub l_emb: Option<f64>,
    pub l_pair: Option<f64>,
    /// Per-relation FD statistics averaged over batches.
    pub relations: Vec<FdRelationStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_task: Option<f64>,
    pub l_emb: Option<f64>,
    pub l_pair: Option<f64>,
    pub val: Option<f64>,
    /// Running gate per triple after the epoch.
    pub gates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdDiagnosticRow {
    pub epoch: usize,
    pub relation: String,
    pub pairs: usize,
    pub l_emb: f64,
    pub l_pair: Option<f64>,
    pub pos_mean: Option<f64>,
    pub neg_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub task: String,
    pub transferred_from: Option<String>,
    pub metric: MetricKind,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub val: Option<f64>,
    pub test: Evaluation,
    pub structure: StructureReport,
    pub fd_diagnostics: Vec<FdDiagnosticRow>,
}

/// Independent RNG seed for one (phase, epoch, batch) slot.
pub fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(seed), |h, &p| mix(h ^ mix(p)))
}

const STREAM_TRAIN: u64 = 1;
const STREAM_FD: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;
const STREAM_LINK: u64 = 5;

/// Sorted `(time, pk)` of the target table for admissibility filters.
#[derive(Debug, Clone)]
struct TargetIndex {
    table: String,
    entries: Vec<(Option<i64>, i64)>,
}

impl TargetIndex {
    fn new(reg: &RelationalEntityGraph, table: &str) -> Result<Self> {
        let ns = reg
            .nodes
            .get(table)
            .ok_or_else(|| TrainError::Config(format!("target table {table} is not a node set")))?;
        let keys = ns
            .keys
            .as_ref()
            .ok_or_else(|| TrainError::Config(format!("target table {table} has no keys")))?;
        let mut entries: Vec<_> = ns.times.iter().copied().zip(keys.iter().copied()).collect();
        entries.sort_unstable();
        Ok(Self {
            table: table.to_string(),
            entries,
        })
    }

    fn admissible(&self, t: i64, causal: bool) -> Vec<i64> {
        self.entries
            .iter()
            .filter(|(time, _)| !causal || time.is_none_or(|x| x <= t))
            .map(|&(_, k)| k)
            .collect()
    }
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub task: &'a TaskSpec,
    pub ws: &'a Workspace,
    pub model: GatedModel,
    pub fd: Option<FdRegularizer>,
    pub store: ParamStore,
    pub transferred_from: Option<String>,
    adam_model: Adam,
    adam_fd: Option<Adam>,
    targets: Option<TargetIndex>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl<'a> Trainer<'a> {
    pub fn new(task: &'a TaskSpec, ws: &'a Workspace, model_cfg: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = GatedModel::new(model_cfg, &ws.reg, ws.stats.clone(), task.task_type, config.roles, &mut store)?;
        let fd = if config.fd_enabled {
            Some(FdRegularizer::new(
                config.fd.clone(),
                &ws.reg,
                model.config.channels,
                model.config.seed,
                &mut store,
            )?)
        } else {
            None
        };
        let adam = AdamConfig {
            lr: config.lr,
            ..Default::default()
        };
        let adam_model = Adam::new(adam, model.params().to_vec());
        let adam_fd = fd.as_ref().map(|f| Adam::new(adam, f.params().to_vec()));
        let targets = match (task.task_type, &task.target_table) {
            (TaskType::LinkPrediction, Some(t)) => Some(TargetIndex::new(&ws.reg, t)?),
            (TaskType::LinkPrediction, None) => {
                return Err(TrainError::Config("link prediction requires a target table".into()))
            }
            _ => None,
        };
        Ok(Self {
            config,
            task,
            ws,
            model,
            fd,
            store,
            transferred_from: None,
            adam_model,
            adam_fd,
            targets,
        })
    }

    /// Fixes the running gates to values learned on another task.
    pub fn transfer(&mut self, gates: &GateFile) -> Result<()> {
        let values: BTreeMap<String, f64> = gates.gates.iter().map(|g| (g.triple.clone(), g.gbar)).collect();
        self.model.freeze_gates(&values)?;
        self.transferred_from = Some(gates.task.clone());
        Ok(())
    }

    pub fn metric(&self) -> MetricKind {
        MetricKind::for_task(self.task.task_type)
    }

    fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            neighbor_samples: self.config.neighbor_samples,
            num_hops: self.model.config.layers,
            seed,
            causal: self.config.causal,
        }
    }

    fn set_trainable(&mut self, phase: Phase) {
        let fd_ids: Vec<ParamId> = self.fd.as_ref().map_or(Vec::new(), |f| f.params().to_vec());
        for &id in self.model.params() {
            self.store.set_requires_grad(id, phase == Phase::A);
        }
        for id in fd_ids {
            self.store.set_requires_grad(id, phase == Phase::B);
        }
    }

    fn seeds(&self, split: Split, idx: &[usize]) -> Vec<SeedEntity> {
        let recs = self.task.records(split);
        idx.iter()
            .map(|&i| SeedEntity {
                entity: recs[i].entity,
                t_predict: recs[i].timestamp,
            })
            .collect()
    }

    /// Forward pass over a source batch, plus the target batch for link
    /// prediction. Returns the task loss.
    fn task_loss<R: Rng>(
        &self,
        tape: &mut Tape,
        batch: &BatchSubgraph,
        out: &ForwardOutput,
        idx: &[usize],
        sampler_seed: u64,
        rng: &mut R,
    ) -> Result<Var> {
        let recs = &self.task.train;
        match self.task.task_type {
            TaskType::Classification | TaskType::Regression => {
                let y = self.model.predict(tape, &self.store, out, batch)?;
                let labels: Vec<f64> = idx.iter().map(|&i| recs[i].label).collect();
                if self.task.task_type == TaskType::Classification {
                    Ok(tape.bce_with_logits(y, &labels)?)
                } else {
                    let t = tape.leaf(Tensor::new(vec![labels.len(), 1], labels)?);
                    let d = tape.sub(y, t)?;
                    let a = tape.abs(d);
                    Ok(tape.mean_all(a))
                }
            }
            TaskType::LinkPrediction => {
                let targets = self.targets.as_ref().expect("link tasks have a target index");
                let k = self.config.link_negatives;
                let mut link_rng = ChaCha8Rng::seed_from_u64(stream_seed(sampler_seed, &[STREAM_LINK]));
                let mut tseeds = Vec::new();
                let mut src_rows = Vec::new();
                let mut labels = Vec::new();
                for (row, &i) in idx.iter().enumerate() {
                    let r = &recs[i];
                    let target = r.target.expect("validated link record");
                    tseeds.push(SeedEntity {
                        entity: target,
                        t_predict: r.timestamp,
                    });
                    src_rows.push(row);
                    labels.push(1.0);
                    let cands: Vec<i64> = targets
                        .admissible(r.timestamp, self.config.causal)
                        .into_iter()
                        .filter(|&c| c != target)
                        .collect();
                    if cands.is_empty() {
                        continue;
                    }
                    for _ in 0..k {
                        tseeds.push(SeedEntity {
                            entity: cands[link_rng.gen_range(0..cands.len())],
                            t_predict: r.timestamp,
                        });
                        src_rows.push(row);
                        labels.push(0.0);
                    }
                }
                let tbatch = sample_batch(&self.ws.reg, &targets.table, &tseeds, &self.sampler(link_rng.gen()))?;
                let tout = self.model.forward(tape, &self.store, &self.ws.reg, &self.ws.cache, &tbatch, true, rng)?;
                let hs = self.model.seed_embeddings(tape, out, batch)?;
                let hs = tape.gather(hs, &src_rows)?;
                let ht = self.model.seed_embeddings(tape, &tout, &tbatch)?;
                let logits = link_score(tape, hs, ht)?;
                Ok(tape.bce_with_logits(logits, &labels)?)
            }
        }
    }

    fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        make_epoch_batches(
            self.task.train.len(),
            self.config.batch_size,
            stream_seed(self.config.seed, &[STREAM_SHUFFLE, epoch as u64]),
        )
    }

    fn fd_loss(
        &self,
        tape: &mut Tape,
        batch: &BatchSubgraph,
        out: &ForwardOutput,
        epoch: usize,
        phase: Phase,
        bi: usize,
    ) -> Result<Option<(Var, Vec<FdRelationStats>)>> {
        let Some(fd) = &self.fd else { return Ok(None) };
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
            self.config.seed,
            &[STREAM_FD, phase as u64, epoch as u64, bi as u64],
        ));
        let o = fd.loss(tape, &self.store, &self.ws.reg, batch, &out.embeddings, &mut rng)?;
        Ok(o.total.map(|t| (t, o.stats)))
    }

    /// Model update over all training batches with the regulariser frozen.
    pub fn phase_a(&mut self, epoch: usize) -> Result<PhaseStats> {
        self.set_trainable(Phase::A);
        let (mut tasks, mut embs, mut pairs) = (Vec::new(), Vec::new(), Vec::new());
        let batches = self.batches(epoch);
        for (bi, idx) in batches.iter().enumerate() {
            let seed = stream_seed(self.config.seed, &[STREAM_TRAIN, epoch as u64, bi as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seeds = self.seeds(Split::Train, idx);
            let batch = sample_batch(&self.ws.reg, &self.task.entity_table, &seeds, &self.sampler(rng.gen()))?;
            let mut tape = Tape::new();
            let out = self.model.forward(&mut tape, &self.store, &self.ws.reg, &self.ws.cache, &batch, true, &mut rng)?;
            let task = self.task_loss(&mut tape, &batch, &out, idx, seed, &mut rng)?;
            let l_task = tape.value(task).item();
            let mut loss = task;
            if let Some((fd, stats)) = self.fd_loss(&mut tape, &batch, &out, epoch, Phase::A, bi)? {
                loss = tape.add(task, fd)?;
                embs.extend(mean(&stats.iter().map(|s| s.l_emb).collect::<Vec<_>>()));
                pairs.extend(mean(&stats.iter().filter_map(|s| s.l_pair).collect::<Vec<_>>()));
            }
            let total = tape.value(loss).item();
            if !total.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    phase: Phase::A,
                    batch: bi,
                    loss: total,
                });
            }
            tasks.push(l_task);
            tape.backward(loss, &mut self.store)?;
            self.adam_model.step(&mut self.store);
            self.model.apply_gate_updates(&out);
        }
        Ok(PhaseStats {
            batches: batches.len(),
            l_task: mean(&tasks),
            l_emb: mean(&embs),
            l_pair: mean(&pairs),
            relations: Vec::new(),
        })
    }

    /// Regulariser update over all training batches with the model frozen
    /// and run in evaluation mode.
    pub fn phase_b(&mut self, epoch: usize) -> Result<PhaseStats> {
        if self.fd.is_none() {
            return Ok(PhaseStats::default());
        }
        self.set_trainable(Phase::B);
        let (mut embs, mut pairs) = (Vec::new(), Vec::new());
        let mut per_rel: BTreeMap<String, Vec<FdRelationStats>> = BTreeMap::new();
        let batches = self.batches(epoch);
        for (bi, idx) in batches.iter().enumerate() {
            let seed = stream_seed(self.config.seed, &[STREAM_TRAIN, epoch as u64, bi as u64, 1]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seeds = self.seeds(Split::Train, idx);
            let batch = sample_batch(&self.ws.reg, &self.task.entity_table, &seeds, &self.sampler(rng.gen()))?;
            let mut tape = Tape::new();
            let out = self.model.forward(&mut tape, &self.store, &self.ws.reg, &self.ws.cache, &batch, false, &mut rng)?;
            let Some((loss, stats)) = self.fd_loss(&mut tape, &batch, &out, epoch, Phase::B, bi)? else {
                continue;
            };
            let v = tape.value(loss).item();
            if !v.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    phase: Phase::B,
                    batch: bi,
                    loss: v,
                });
            }
            embs.extend(mean(&stats.iter().map(|s| s.l_emb).collect::<Vec<_>>()));
            pairs.extend(mean(&stats.iter().filter_map(|s| s.l_pair).collect::<Vec<_>>()));
            for s in stats {
                per_rel.entry(s.relation.clone()).or_default().push(s);
            }
            tape.backward(loss, &mut self.store)?;
            if let Some(adam) = &mut self.adam_fd {
                adam.step(&mut self.store);
            }
        }
        if let Some(fd) = &self.fd {
            fd.after_update(&mut self.store);
        }
        let relations = per_rel
            .into_iter()
            .map(|(relation, v)| {
                let opt = |f: &dyn Fn(&FdRelationStats) -> Option<f64>| mean(&v.iter().filter_map(f).collect::<Vec<_>>());
                FdRelationStats {
                    relation,
                    pairs: v.iter().map(|s| s.pairs).sum(),
                    l_emb: mean(&v.iter().map(|s| s.l_emb).collect::<Vec<_>>()).unwrap_or(0.0),
                    l_pair: opt(&|s| s.l_pair),
                    pos_mean: opt(&|s| s.pos_mean),
                    neg_mean: opt(&|s| s.neg_mean),
                }
            })
            .collect();
        Ok(PhaseStats {
            batches: batches.len(),
            l_task: None,
            l_emb: mean(&embs),
            l_pair: mean(&pairs),
            relations,
        })
    }

    /// Final seed embeddings (evaluation mode) of `(entity, t)` pairs of
    /// `table`, as rows of one tensor.
    fn embed(&self, table: &str, seeds: &[SeedEntity], stream: u64) -> Result<Tensor> {
        let c = self.model.config.channels;
        let mut data = Vec::with_capacity(seeds.len() * c);
        for (bi, chunk) in seeds.chunks(self.config.batch_size).enumerate() {
            let seed = stream_seed(self.config.seed, &[STREAM_EVAL, stream, bi as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = sample_batch(&self.ws.reg, table, chunk, &self.sampler(rng.gen()))?;
            let mut tape = Tape::new();
            let out = self.model.forward(&mut tape, &self.store, &self.ws.reg, &self.ws.cache, &batch, false, &mut rng)?;
            let h = self.model.seed_embeddings(&mut tape, &out, &batch)?;
            data.extend_from_slice(tape.value(h).data());
        }
        Ok(Tensor::new(vec![seeds.len(), c], data)?)
    }

    /// Scalar predictions (logits for classification) of a split.
    pub fn predict(&self, split: Split) -> Result<Vec<f64>> {
        let recs = self.task.records(split);
        let mut preds = Vec::with_capacity(recs.len());
        let all: Vec<usize> = (0..recs.len()).collect();
        for (bi, idx) in all.chunks(self.config.batch_size).enumerate() {
            let seed = stream_seed(self.config.seed, &[STREAM_EVAL, split as u64, bi as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seeds = self.seeds(split, idx);
            let batch = sample_batch(&self.ws.reg, &self.task.entity_table, &seeds, &self.sampler(rng.gen()))?;
            let mut tape = Tape::new();
            let out = self.model.forward(&mut tape, &self.store, &self.ws.reg, &self.ws.cache, &batch, false, &mut rng)?;
            let y = self.model.predict(&mut tape, &self.store, &out, &batch)?;
            preds.extend_from_slice(tape.value(y).data());
        }
        Ok(preds)
    }

    /// Ranking queries of a link split: one per `(source, t)` over every
    /// admissible target at `t`.
    pub fn ranking_queries(&self, split: Split) -> Result<Vec<RankingQuery>> {
        let targets = self.targets.as_ref().expect("link tasks have a target index");
        let mut groups: BTreeMap<i64, BTreeMap<i64, BTreeSet<i64>>> = BTreeMap::new();
        for r in self.task.records(split) {
            if let Some(t) = r.target {
                groups.entry(r.timestamp).or_default().entry(r.entity).or_default().insert(t);
            }
        }
        let mut queries = Vec::new();
        for (gi, (&t, sources)) in groups.iter().enumerate() {
            let cands = targets.admissible(t, self.config.causal);
            if cands.is_empty() {
                continue;
            }
            let pos: HashMap<i64, usize> = cands.iter().enumerate().map(|(i, &k)| (k, i)).collect();
            let src_seeds: Vec<SeedEntity> = sources.keys().map(|&e| SeedEntity { entity: e, t_predict: t }).collect();
            let dst_seeds: Vec<SeedEntity> = cands.iter().map(|&e| SeedEntity { entity: e, t_predict: t }).collect();
            let hs = self.embed(&self.task.entity_table, &src_seeds, 2 * gi as u64)?;
            let ht = self.embed(&targets.table, &dst_seeds, 2 * gi as u64 + 1)?;
            let scores = hs.matmul(&ht.transpose()?)?;
            for (row, rel) in sources.values().enumerate() {
                let mut relevant = vec![false; cands.len()];
                for k in rel {
                    if let Some(&i) = pos.get(k) {
                        relevant[i] = true;
                    }
                }
                queries.push(RankingQuery {
                    scores: scores.row(row).to_vec(),
                    relevant,
                });
            }
        }
        Ok(queries)
    }

    pub fn evaluate(&self, split: Split) -> Result<Evaluation> {
        let recs = self.task.records(split);
        let metric = self.metric();
        let value = if recs.is_empty() {
            None
        } else {
            match self.task.task_type {
                TaskType::Classification => {
                    let labels: Vec<f64> = recs.iter().map(|r| r.label).collect();
                    roc_auc(&labels, &self.predict(split)?)
                }
                TaskType::Regression => {
                    let labels: Vec<f64> = recs.iter().map(|r| r.label).collect();
                    Some(mean_absolute_error(&self.predict(split)?, &labels))
                }
                TaskType::LinkPrediction => Some(map_at_k(&self.ranking_queries(split)?, self.task.eval_k)),
            }
        };
        Ok(Evaluation {
            split,
            metric,
            value,
            records: recs.len(),
        })
    }

    fn gates(&self) -> BTreeMap<String, f64> {
        self.model.gates.iter().map(|g| (g.triple.clone(), g.gbar)).collect()
    }

    pub fn structure(&self) -> StructureReport {
        StructureReport::from_model(&self.model, Some(&self.task.name))
    }

    /// Hash of the current parameter values of one group.
    pub fn param_hash(&self, model: bool) -> u64 {
        let ids: &[ParamId] = if model {
            self.model.params()
        } else {
            self.fd.as_ref().map_or(&[], |f| f.params())
        };
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &id in ids {
            for v in self.store.value(id).data() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Full alternating run with early stopping; the best validation
    /// snapshot is restored before testing.
    pub fn fit(&mut self) -> Result<TrainOutcome> {
        let metric = self.metric();
        let mut history = Vec::new();
        let mut fd_diagnostics = Vec::new();
        let mut best: Option<(usize, Option<f64>, Vec<Tensor>, Vec<GateState>)> = None;
        let mut since_best = 0usize;
        for epoch in 0..self.config.epochs {
            let a = self.phase_a(epoch)?;
            let b = self.phase_b(epoch)?;
            for s in b.relations {
                fd_diagnostics.push(FdDiagnosticRow {
                    epoch,
                    relation: s.relation,
                    pairs: s.pairs,
                    l_emb: s.l_emb,
                    l_pair: s.l_pair,
                    pos_mean: s.pos_mean,
                    neg_mean: s.neg_mean,
                });
            }
            let val = self.evaluate(Split::Val)?.value;
            log::info!("epoch {epoch}: task loss {:?}, val {:?}", a.l_task, val);
            history.push(EpochRecord {
                epoch,
                l_task: a.l_task,
                l_emb: a.l_emb,
                l_pair: a.l_pair,
                val,
                gates: self.gates(),
            });
            let improved = match (&best, val) {
                (None, _) => true,
                (Some((_, None, ..)), Some(_)) => true,
                (Some((_, Some(old), ..)), Some(new)) => metric.improves(new, *old),
                (Some(_), None) => false,
            };
            if improved {
                let snapshot = self.store.ids().map(|id| self.store.value(id).clone()).collect();
                best = Some((epoch, val, snapshot, self.model.gates.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= self.config.patience {
                    log::info!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
        let (best_epoch, val) = match best {
            Some((epoch, val, values, gates)) => {
                let ids: Vec<ParamId> = self.store.ids().collect();
                for (id, v) in ids.into_iter().zip(values) {
                    self.store.assign(id, v)?;
                }
                self.model.gates = gates;
                (Some(epoch), val)
            }
            None => (None, None),
        };
        let test = self.evaluate(Split::Test)?;
        Ok(TrainOutcome {
            task: self.task.name.clone(),
            transferred_from: self.transferred_from.clone(),
            metric,
            history,
            best_epoch,
            val,
            test,
            structure: self.structure(),
            fd_diagnostics,
        })
    }
}
