//! Gated two-branch relational GNN.
//!
//! Every layer runs a node branch (per-relation linear maps, mean over
//! sampled neighbours) and, for each active edge triple, an edge branch
//! over sampled path instances. The edge message of triple `r` competes
//! with the node message of its matched relation `v → w` through a gate
//! `ĝ_r`:
//!
//! ```text
//! z_w = self(h_w) + Σ unmatched msg + Σ_r [(1 − ĝ_r)·msgᴺ_m / k_m + ĝ_r·msgᴱ_r]
//! ```
//!
//! where `k_m` counts the active triples sharing matched relation `m`.

mod encoder;

pub use encoder::{CategoricalColumn, FeatureCache, FeatureStats, NumericColumn, TableStats};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rdb::TaskType;
use crate::sampler::BatchSubgraph;
use crate::schemagraph::{
    node_relations, Direction, EdgeRelationTriple, NodeRelation, Pattern, RelationalEntityGraph, Role,
    RoleAssignment, SchemaGraph,
};
use crate::tensor::{init_param, ParamId, ParamStore, Reduce, Tape, Tensor, TensorError, Var};

use encoder::TableEncoder;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("incompatible model: {0}")]
    Incompatible(String),
    #[error("invalid model config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub layers: usize,
    pub dropout: f64,
    /// Weight of the running gate in the blended gate.
    pub alpha: f64,
    /// Momentum of the running gate.
    pub mu: f64,
    pub activation: Activation,
    pub aggregation: Reduce,
    /// Width of each categorical embedding.
    pub cat_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            layers: 2,
            dropout: 0.0,
            alpha: 0.9,
            mu: 0.9,
            activation: Activation::Relu,
            aggregation: Reduce::Mean,
            cat_dim: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.channels == 0 {
            return bad("channels must be positive");
        }
        if !(1..=8).contains(&self.layers) {
            return bad("layers must be in 1..=8");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.mu) {
            return bad("mu must be in [0, 1)");
        }
        if self.cat_dim == 0 {
            return bad("cat_dim must be positive");
        }
        Ok(())
    }
}

/// How the node/edge reading of each triple is decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoleMode {
    /// Learned gates.
    Learn,
    /// Every intermediate table stays a node; triples unused.
    AllNode,
    /// Every triple uses the edge branch only.
    AllEdge,
    /// Fixed random gate per triple.
    Random,
}

impl RoleMode {
    pub fn assignment(self, sg: &SchemaGraph, triples: &[EdgeRelationTriple]) -> RoleAssignment {
        let role = match self {
            RoleMode::AllNode => Role::Node,
            RoleMode::AllEdge => Role::Edge,
            RoleMode::Learn | RoleMode::Random => Role::Learn,
        };
        RoleAssignment::uniform(sg, triples, role)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Triple not used.
    Off,
    /// Edge branch replaces the matched node message (`ĝ = 1`).
    Edge,
    /// Gate head trained, running gate updated while training.
    Learned,
    /// Running gate fixed.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    pub triple: String,
    pub mode: GateMode,
    pub gbar: f64,
    pub mu: f64,
    pub alpha: f64,
}

/// Hands out named parameters with name-derived seeds, so a parameter's
/// initial value does not depend on which other parameters exist.
pub(crate) struct ParamFactory<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    prefix: &'static str,
    ids: Vec<ParamId>,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl<'a> ParamFactory<'a> {
    pub(crate) fn new(store: &'a mut ParamStore, seed: u64, prefix: &'static str) -> Self {
        Self {
            store,
            seed,
            prefix,
            ids: Vec::new(),
        }
    }

    pub(crate) fn glorot(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let full = format!("{}{name}", self.prefix);
        let value = init_param(shape, fan_in.max(1), self.seed ^ fnv1a(&full));
        self.add(full, value)
    }

    pub(crate) fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let full = format!("{}{name}", self.prefix);
        self.add(full, Tensor::zeros(shape))
    }

    fn add(&mut self, name: String, value: Tensor) -> ParamId {
        let id = self.store.add(name, value);
        self.ids.push(id);
        id
    }

    pub(crate) fn finish(self) -> Vec<ParamId> {
        self.ids
    }
}

#[derive(Debug, Clone)]
enum Conv {
    CoOccurrence { w: ParamId },
    Completion { w1: ParamId, f: ParamId, w2: ParamId },
}

#[derive(Debug, Clone)]
struct Layer {
    self_maps: BTreeMap<String, (ParamId, ParamId)>,
    relation_maps: Vec<ParamId>,
    convs: Vec<Option<Conv>>,
    gate_heads: Vec<Option<(ParamId, ParamId)>>,
}

/// `W (h_w ‖ h_v ‖ h_u)` per path instance (rows aligned).
pub fn cooccurrence_conv(tape: &mut Tape, w: Var, h_w: Var, h_v: Var, h_u: Var) -> Result<Var> {
    let x = tape.concat(&[h_w, h_v, h_u], 1)?;
    Ok(tape.matmul(x, w)?)
}

/// `W₂ (h_w ‖ σ(f(h_v ‖ h_u)) · W₁ (h_v ‖ h_u))` per path instance.
pub fn completion_conv(
    tape: &mut Tape,
    w1: Var,
    f: Var,
    w2: Var,
    h_w: Var,
    h_v: Var,
    h_u: Var,
) -> Result<Var> {
    let vu = tape.concat(&[h_v, h_u], 1)?;
    let logit = tape.matmul(vu, f)?;
    let gate = tape.sigmoid(logit);
    let inner = tape.matmul(vu, w1)?;
    let modulated = tape.mul_col(inner, gate)?;
    let x = tape.concat(&[h_w, modulated], 1)?;
    Ok(tape.matmul(x, w2)?)
}

#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    /// Per-node adaptive gate `[n, 1]`.
    pub tilde: Var,
    /// Blend with the running gate `[n, 1]`.
    pub blended: Var,
    /// Running gate after this batch (1 element).
    pub running: Var,
}

/// Adaptive gate from both branch outputs, blended with the running
/// gate and folded into its momentum update.
#[allow(clippy::too_many_arguments)]
pub fn compute_gate(
    tape: &mut Tape,
    m: Var,
    b: Var,
    h_n: Var,
    h_e: Var,
    gbar: f64,
    alpha: f64,
    mu: f64,
) -> Result<GateVars> {
    let x = tape.concat(&[h_n, h_e], 1)?;
    let logit = tape.matmul(x, m)?;
    let logit = tape.add_row(logit, b)?;
    let tilde = tape.sigmoid(logit);
    let scaled = tape.mul_const(tilde, 1.0 - alpha);
    let blended = tape.add_const(scaled, alpha * gbar);
    let mean = tape.mean_all(blended);
    let scaled = tape.mul_const(mean, 1.0 - mu);
    let running = tape.add_const(scaled, mu * gbar);
    Ok(GateVars {
        tilde,
        blended,
        running,
    })
}

/// `Σ_r [(1 − g_r)·hᴺ_r + g_r·hᴱ_r]`; each gate is a 1-element var.
pub fn fuse(tape: &mut Tape, terms: &[(Var, Var, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(h_n, h_e, g) in terms {
        let diff = tape.sub(h_e, h_n)?;
        let moved = tape.scale(diff, g)?;
        let term = tape.add(h_n, moved)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| ModelError::Config("fuse needs at least one term".into()))
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final embeddings per table with nodes in the batch.
    pub embeddings: BTreeMap<String, Var>,
    /// New running gate per triple (learned gates in training mode only).
    pub gate_updates: Vec<Option<f64>>,
    /// Mean adaptive gate per triple, averaged over layers.
    pub gate_tilde: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct GatedModel {
    pub config: ModelConfig,
    pub stats: FeatureStats,
    pub task_type: TaskType,
    schema_graph: SchemaGraph,
    triples: Vec<EdgeRelationTriple>,
    triple_ids: Vec<String>,
    relations: Vec<NodeRelation>,
    encoders: BTreeMap<String, TableEncoder>,
    layers: Vec<Layer>,
    pub gates: Vec<GateState>,
    head: Option<(ParamId, ParamId)>,
    params: Vec<ParamId>,
}

impl GatedModel {
    /// Registers all parameters in `store` under the `model.` prefix.
    /// Triples without a materialised path relation in `reg` are off.
    pub fn new(
        config: ModelConfig,
        reg: &RelationalEntityGraph,
        stats: FeatureStats,
        task_type: TaskType,
        roles: RoleMode,
        store: &mut ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        let sg = reg.schema_graph.clone();
        let triples = reg.triples.clone();
        let triple_ids: Vec<String> = triples.iter().map(|t| t.id(&sg)).collect();
        let relations = node_relations(&sg);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6a7e);
        let gates: Vec<GateState> = triples
            .iter()
            .zip(&triple_ids)
            .map(|(t, id)| {
                let materialised = reg.path(t).is_some();
                let (mode, gbar) = match (materialised, roles) {
                    (false, _) | (_, RoleMode::AllNode) => (GateMode::Off, 0.5),
                    (true, RoleMode::AllEdge) => (GateMode::Edge, 1.0),
                    (true, RoleMode::Learn) => (GateMode::Learned, 0.5),
                    (true, RoleMode::Random) => (GateMode::Frozen, rng.gen_range(0.05..0.95)),
                };
                GateState {
                    triple: id.clone(),
                    mode,
                    gbar,
                    mu: config.mu,
                    alpha: config.alpha,
                }
            })
            .collect();

        let c = config.channels;
        let mut pf = ParamFactory::new(store, config.seed, "model.");
        let encoders = encoder::build_encoders(&stats, c, config.cat_dim, &mut pf);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let self_maps = stats
                .tables
                .keys()
                .map(|t| {
                    (
                        t.clone(),
                        (
                            pf.glorot(&format!("l{l}.self.{t}.w"), &[c, c], c),
                            pf.zeros(&format!("l{l}.self.{t}.b"), &[c]),
                        ),
                    )
                })
                .collect();
            let relation_maps = relations
                .iter()
                .map(|r| pf.glorot(&format!("l{l}.rel.{}", r.label(&sg)), &[c, c], c))
                .collect();
            let mut convs = Vec::new();
            let mut gate_heads = Vec::new();
            for ((t, id), g) in triples.iter().zip(&triple_ids).zip(&gates) {
                if g.mode == GateMode::Off {
                    convs.push(None);
                    gate_heads.push(None);
                    continue;
                }
                convs.push(Some(match t.pattern {
                    Pattern::CoOccurrence => Conv::CoOccurrence {
                        w: pf.glorot(&format!("l{l}.conv.{id}.w"), &[3 * c, c], 3 * c),
                    },
                    Pattern::Completion => Conv::Completion {
                        w1: pf.glorot(&format!("l{l}.conv.{id}.w1"), &[2 * c, c], 2 * c),
                        f: pf.glorot(&format!("l{l}.conv.{id}.f"), &[2 * c, 1], 2 * c),
                        w2: pf.glorot(&format!("l{l}.conv.{id}.w2"), &[2 * c, c], 2 * c),
                    },
                }));
                gate_heads.push((g.mode == GateMode::Learned).then(|| {
                    (
                        pf.zeros(&format!("l{l}.gate.{id}.m"), &[2 * c, 1]),
                        pf.zeros(&format!("l{l}.gate.{id}.b"), &[1]),
                    )
                }));
            }
            layers.push(Layer {
                self_maps,
                relation_maps,
                convs,
                gate_heads,
            });
        }
        let head = (task_type != TaskType::LinkPrediction)
            .then(|| (pf.glorot("head.w", &[c, 1], c), pf.zeros("head.b", &[1])));
        let params = pf.finish();
        Ok(Self {
            config,
            stats,
            task_type,
            schema_graph: sg,
            triples,
            triple_ids,
            relations,
            encoders,
            layers,
            gates,
            head,
            params,
        })
    }

    /// All parameters owned by the model.
    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn triples(&self) -> &[EdgeRelationTriple] {
        &self.triples
    }

    pub fn triple_ids(&self) -> &[String] {
        &self.triple_ids
    }

    pub fn schema_graph(&self) -> &SchemaGraph {
        &self.schema_graph
    }

    /// Fixes every active gate to the given running values.
    pub fn freeze_gates(&mut self, values: &BTreeMap<String, f64>) -> Result<()> {
        let missing: Vec<&str> = self
            .triple_ids
            .iter()
            .filter(|id| !values.contains_key(*id))
            .map(String::as_str)
            .collect();
        let extra: Vec<&str> = values
            .keys()
            .filter(|k| !self.triple_ids.contains(k))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(ModelError::Incompatible(format!(
                "triple sets differ; missing {missing:?}, unknown {extra:?}"
            )));
        }
        for g in &mut self.gates {
            if g.mode != GateMode::Off {
                g.mode = GateMode::Frozen;
                g.gbar = values[&g.triple];
            }
        }
        Ok(())
    }

    pub fn apply_gate_updates(&mut self, out: &ForwardOutput) {
        for (g, u) in self.gates.iter_mut().zip(&out.gate_updates) {
            if let (GateMode::Learned, Some(v)) = (g.mode, u) {
                g.gbar = *v;
            }
        }
    }

    fn act(&self, tape: &mut Tape, x: Var) -> Var {
        match self.config.activation {
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }

    fn aggregate(&self, tape: &mut Tape, x: Var, w: Var, seg: &[usize], n: usize) -> Result<Var> {
        let reduce = self.config.aggregation;
        Ok(if reduce == Reduce::Max {
            let y = tape.matmul(x, w)?;
            tape.segment_reduce(y, seg, n, reduce)?
        } else {
            let y = tape.segment_reduce(x, seg, n, reduce)?;
            tape.matmul(y, w)?
        })
    }

    /// Runs all layers. `train` enables dropout and the differentiable
    /// running-gate update; otherwise running gates are used as stored.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        reg: &RelationalEntityGraph,
        cache: &FeatureCache,
        batch: &BatchSubgraph,
        train: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let sg = &self.schema_graph;
        let c = self.config.channels;
        let nt = self.triples.len();
        let mut h = encoder::encode(tape, store, &self.encoders, &self.stats, cache, batch, c)?;

        // batch path lists per model triple
        let mut batch_paths = vec![None; nt];
        for bp in &batch.paths {
            let triple = &reg.paths[bp.path].triple;
            if let Some(ti) = self.triples.iter().position(|t| t == triple) {
                batch_paths[ti] = Some(bp);
            }
        }
        let matched_rel = |t: &EdgeRelationTriple| {
            self.relations
                .iter()
                .position(|r| r.arc == t.arc_vw && r.dir == Direction::Forward)
                .expect("every arc has a forward relation")
        };

        let mut gate_sum = vec![0.0; nt];
        let mut tilde_sum = vec![0.0; nt];
        let mut gate_layers = vec![0usize; nt];
        for layer in &self.layers {
            let mut z: BTreeMap<String, Var> = BTreeMap::new();
            for (t, &x) in &h {
                let (w, b) = layer.self_maps[t];
                let (w, b) = (tape.param(store, w), tape.param(store, b));
                let y = tape.matmul(x, w)?;
                z.insert(t.clone(), tape.add_row(y, b)?);
            }

            let mut msgs: Vec<Option<Var>> = vec![None; self.relations.len()];
            for (ri, rel) in self.relations.iter().enumerate() {
                let e = &batch.edges[ri];
                debug_assert_eq!(e.relation, *rel);
                let (Some(&hs), Some(&hd)) = (h.get(rel.src_table(sg)), h.get(rel.dst_table(sg))) else {
                    continue;
                };
                if e.src.is_empty() {
                    continue;
                }
                let n = tape.shape(hd)[0];
                let x = tape.gather(hs, &e.src)?;
                let w = tape.param(store, layer.relation_maps[ri]);
                msgs[ri] = Some(self.aggregate(tape, x, w, &e.dst, n)?);
            }

            let mut k = vec![0usize; self.relations.len()];
            for (t, g) in self.triples.iter().zip(&self.gates) {
                if g.mode != GateMode::Off && h.contains_key(&t.w) {
                    k[matched_rel(t)] += 1;
                }
            }

            for (ti, t) in self.triples.iter().enumerate() {
                let g = &self.gates[ti];
                if g.mode == GateMode::Off {
                    continue;
                }
                let Some(&hw) = h.get(&t.w) else { continue };
                let n = tape.shape(hw)[0];
                let msg_e = match batch_paths[ti].filter(|bp| !bp.is_empty()) {
                    Some(bp) => {
                        let (hv, hu) = (h[&t.v], h[&t.u]);
                        let xw = tape.gather(hw, &bp.w)?;
                        let xv = tape.gather(hv, &bp.v)?;
                        let xu = tape.gather(hu, &bp.u)?;
                        let m = match layer.convs[ti].as_ref().expect("active triple has conv") {
                            Conv::CoOccurrence { w } => {
                                let w = tape.param(store, *w);
                                cooccurrence_conv(tape, w, xw, xv, xu)?
                            }
                            Conv::Completion { w1, f, w2 } => {
                                let (w1, f, w2) =
                                    (tape.param(store, *w1), tape.param(store, *f), tape.param(store, *w2));
                                completion_conv(tape, w1, f, w2, xw, xv, xu)?
                            }
                        };
                        tape.segment_reduce(m, &bp.w, n, self.config.aggregation)?
                    }
                    None => tape.leaf(Tensor::zeros(&[n, c])),
                };
                let m = matched_rel(t);
                let msg_n = match msgs[m] {
                    Some(v) => tape.mul_const(v, 1.0 / k[m] as f64),
                    None => tape.leaf(Tensor::zeros(&[n, c])),
                };
                let gate = match g.mode {
                    GateMode::Edge => None,
                    GateMode::Frozen => Some(tape.leaf(Tensor::scalar(g.gbar))),
                    GateMode::Learned if !train => Some(tape.leaf(Tensor::scalar(g.gbar))),
                    GateMode::Learned => {
                        let (hm, hb) = layer.gate_heads[ti].expect("learned gate has head");
                        let (hm, hb) = (tape.param(store, hm), tape.param(store, hb));
                        let gv = compute_gate(tape, hm, hb, msg_n, msg_e, g.gbar, g.alpha, g.mu)?;
                        gate_sum[ti] += tape.value(gv.running).item();
                        let tl = tape.value(gv.tilde);
                        tilde_sum[ti] += tl.data().iter().sum::<f64>() / tl.len().max(1) as f64;
                        gate_layers[ti] += 1;
                        Some(gv.running)
                    }
                    GateMode::Off => unreachable!(),
                };
                let term = match gate {
                    Some(g) => fuse(tape, &[(msg_n, msg_e, g)])?,
                    None => msg_e,
                };
                let zw = z.get_mut(&t.w).expect("table present");
                *zw = tape.add(*zw, term)?;
            }

            for (ri, rel) in self.relations.iter().enumerate() {
                if k[ri] > 0 {
                    continue;
                }
                if let Some(msg) = msgs[ri] {
                    let zd = z.get_mut(rel.dst_table(sg)).expect("table present");
                    *zd = tape.add(*zd, msg)?;
                }
            }

            let mut next = BTreeMap::new();
            for (t, x) in z {
                let a = self.act(tape, x);
                next.insert(t, tape.dropout(a, self.config.dropout, train, rng));
            }
            h = next;
        }

        let per_layer = |sum: &[f64]| -> Vec<Option<f64>> {
            sum.iter()
                .zip(&gate_layers)
                .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
                .collect()
        };
        Ok(ForwardOutput {
            embeddings: h,
            gate_updates: per_layer(&gate_sum),
            gate_tilde: per_layer(&tilde_sum),
        })
    }

    /// Logits (classification) or predictions (regression) for the seeds.
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, out: &ForwardOutput, batch: &BatchSubgraph) -> Result<Var> {
        let (w, b) = self
            .head
            .ok_or_else(|| ModelError::Config("link prediction has no scalar head".into()))?;
        let h = self.seed_embeddings(tape, out, batch)?;
        let (w, b) = (tape.param(store, w), tape.param(store, b));
        let y = tape.matmul(h, w)?;
        Ok(tape.add_row(y, b)?)
    }

    /// Final embeddings of the seeds, in seed order.
    pub fn seed_embeddings(&self, tape: &mut Tape, out: &ForwardOutput, batch: &BatchSubgraph) -> Result<Var> {
        let h = *out.embeddings.get(&batch.entity_table).ok_or_else(|| {
            ModelError::Config(format!("no embeddings for entity table {}", batch.entity_table))
        })?;
        Ok(tape.gather(h, &batch.seed_nodes)?)
    }
}

/// Inner product of aligned rows: `[n, c] × [n, c] → [n]`.
pub fn link_score(tape: &mut Tape, src: Var, dst: Var) -> Result<Var> {
    let p = tape.mul(src, dst)?;
    Ok(tape.sum(p, 1)?)
}
