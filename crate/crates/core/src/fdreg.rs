//! Functional-dependency regularisation over foreign-key links.
//!
//! For every key relation `T_p → T_q` the embedding differences of linked
//! entity pairs are pulled towards a shared low-rank affine subspace, and a
//! small scorer learns to tell true links from in-batch mismatches.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ParamFactory;
use crate::sampler::BatchSubgraph;
use crate::schemagraph::{ArcId, RelationalEntityGraph};
use crate::tensor::{Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum FdError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid regulariser config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, FdError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FdConfig {
    /// Weight of the subspace loss.
    pub beta: f64,
    /// Weight of the contrastive loss.
    pub gamma: f64,
    pub tau: f64,
    /// Negatives per positive pair.
    pub negatives: usize,
    /// Subspace rank; `channels / 4` (at least 1) when unset.
    pub rank: Option<usize>,
    /// Re-orthonormalise each projection after its update phase.
    pub reorthonormalize: bool,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            beta: 1e-6,
            gamma: 0.1,
            tau: 0.1,
            negatives: 8,
            rank: None,
            reorthonormalize: false,
        }
    }
}

impl FdConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        let bad = |m: String| Err(FdError::Config(m));
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return bad("beta and gamma must be non-negative".into());
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive".into());
        }
        if self.negatives == 0 {
            return bad("at least one negative per pair is required".into());
        }
        let d = self.rank_for(channels);
        if d == 0 || (channels > 1 && d >= channels) {
            return bad(format!("rank {d} must be in 1..{channels}"));
        }
        Ok(())
    }

    pub fn rank_for(&self, channels: usize) -> usize {
        self.rank.unwrap_or((channels / 4).max(1))
    }

    /// Whether the regulariser contributes anything to a loss.
    pub fn is_active(&self) -> bool {
        self.beta > 0.0 || self.gamma > 0.0
    }
}

/// Subspace and scorer parameters of one key relation.
#[derive(Debug, Clone)]
pub struct FdRelation {
    pub arc: ArcId,
    pub label: String,
    /// Referencing table.
    pub source: String,
    /// Referenced table.
    pub target: String,
    /// Projection `[channels, rank]`.
    pub p: ParamId,
    /// Shift `[channels]`.
    pub s: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct FdRegularizer {
    pub config: FdConfig,
    pub channels: usize,
    pub relations: Vec<FdRelation>,
    params: Vec<ParamId>,
}

/// Linked pairs of one relation, as batch-local rows of the source and
/// target tables.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FdPairs {
    pub relation: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl FdPairs {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Tape inputs of one relation's losses.
#[derive(Debug, Clone)]
pub struct FdRelationBatch {
    pub relation: usize,
    /// Referencing embeddings `[n, C]`.
    pub h_i: Var,
    /// Referenced embeddings `[n, C]`, row-aligned with `h_i`.
    pub h_j: Var,
    /// Rows of `h_i` that have negatives, and one `[m, C]` block per
    /// negative slot aligned with those rows.
    pub contrast_rows: Vec<usize>,
    pub negatives: Vec<Var>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FdRelationStats {
    pub relation: String,
    pub pairs: usize,
    pub l_emb: f64,
    pub l_pair: Option<f64>,
    pub pos_mean: Option<f64>,
    pub neg_mean: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FdOutput {
    /// `β·mean L_emb + γ·mean L_pair`; `None` when no relation has pairs.
    pub total: Option<Var>,
    pub stats: Vec<FdRelationStats>,
}

/// Squared distance of `diff − s` to its image under `P Pᵀ`, averaged
/// over rows. Empty input gives zero.
pub fn loss_emb(tape: &mut Tape, diffs: Var, p: Var, s: Var) -> Result<Var> {
    let n = tape.shape(diffs)[0];
    if n == 0 {
        log::debug!("subspace loss on an empty pair set");
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }
    let neg_s = tape.neg(s);
    let x = tape.add_row(diffs, neg_s)?;
    let pt = tape.transpose(p)?;
    let low = tape.matmul(x, p)?;
    let proj = tape.matmul(low, pt)?;
    let r = tape.sub(x, proj)?;
    let sq = tape.sq_norm(r);
    Ok(tape.mul_const(sq, 1.0 / n as f64))
}

/// Two-layer perceptron score of `h_i − h_j`, `[n, 1]`.
pub fn score_pairs(tape: &mut Tape, mlp: [Var; 4], h_i: Var, h_j: Var) -> Result<Var> {
    let [w1, b1, w2, b2] = mlp;
    let x = tape.sub(h_i, h_j)?;
    let a = tape.matmul(x, w1)?;
    let a = tape.add_row(a, b1)?;
    let a = tape.relu(a);
    let y = tape.matmul(a, w2)?;
    Ok(tape.add_row(y, b2)?)
}

/// InfoNCE with `d(x) = exp(x / τ)`: mean over rows of
/// `logsumexp([pos, negs] / τ) − pos / τ`.
pub fn loss_pair(tape: &mut Tape, pos: Var, negs: &[Var], tau: f64) -> Result<Var> {
    let mut cols = vec![pos];
    cols.extend_from_slice(negs);
    let all = tape.concat(&cols, 1)?;
    let all = tape.mul_const(all, 1.0 / tau);
    let lse = tape.logsumexp(all, 1)?;
    let p = tape.mul_const(pos, 1.0 / tau);
    let p = tape.sum(p, 1)?;
    let per_row = tape.sub(lse, p)?;
    Ok(tape.mean_all(per_row))
}

/// In-batch key links of `arc` from `source` to `target` within the same
/// seed subgraph, one per distinct entity pair.
pub fn in_batch_links(
    reg: &RelationalEntityGraph,
    batch: &BatchSubgraph,
    arc: ArcId,
    source: &str,
    target: &str,
) -> (Vec<usize>, Vec<usize>) {
    let (Some(src), Some(dst)) = (batch.nodes.get(source), batch.nodes.get(target)) else {
        return Default::default();
    };
    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    for (j, (&g, &s)) in dst.global.iter().zip(&dst.seed).enumerate() {
        index.entry((s, g)).or_insert(j);
    }
    let fpk = reg.fpk(arc);
    let mut seen = HashSet::new();
    let (mut out_i, mut out_j) = (Vec::new(), Vec::new());
    for (i, (&g, &s)) in src.global.iter().zip(&src.seed).enumerate() {
        let Some(t) = fpk.target_of(g) else { continue };
        if let Some(&j) = index.get(&(s, t)) {
            if seen.insert((g, t)) {
                out_i.push(i);
                out_j.push(j);
            }
        }
    }
    (out_i, out_j)
}

/// Modified Gram–Schmidt on the columns of a `[n, d]` matrix; columns
/// that collapse are left at zero.
pub fn orthonormalize_columns(m: &mut Tensor) {
    let (n, d) = (m.rows(), m.cols());
    let data = m.data_mut();
    for c in 0..d {
        for prev in 0..c {
            let dot: f64 = (0..n).map(|r| data[r * d + c] * data[r * d + prev]).sum();
            for r in 0..n {
                data[r * d + c] -= dot * data[r * d + prev];
            }
        }
        let norm = (0..n).map(|r| data[r * d + c].powi(2)).sum::<f64>().sqrt();
        for r in 0..n {
            data[r * d + c] = if norm > 1e-12 { data[r * d + c] / norm } else { 0.0 };
        }
    }
}

impl FdRegularizer {
    /// One relation per key arc whose endpoints are both node sets.
    pub fn new(config: FdConfig, reg: &RelationalEntityGraph, channels: usize, seed: u64, store: &mut ParamStore) -> Result<Self> {
        config.validate(channels)?;
        let d = config.rank_for(channels);
        let sg = &reg.schema_graph;
        let mut pf = ParamFactory::new(store, seed, "fd.");
        let mut relations = Vec::new();
        for id in sg.arc_ids() {
            let arc = sg.arc(id);
            if !reg.nodes.contains_key(&arc.source) || !reg.nodes.contains_key(&arc.target) {
                continue;
            }
            let label = arc.label();
            relations.push(FdRelation {
                arc: id,
                p: pf.glorot(&format!("{label}.p"), &[channels, d], channels),
                s: pf.zeros(&format!("{label}.s"), &[channels]),
                w1: pf.glorot(&format!("{label}.w1"), &[channels, channels], channels),
                b1: pf.zeros(&format!("{label}.b1"), &[channels]),
                w2: pf.glorot(&format!("{label}.w2"), &[channels, 1], channels),
                b2: pf.zeros(&format!("{label}.b2"), &[1]),
                source: arc.source.clone(),
                target: arc.target.clone(),
                label,
            });
        }
        Ok(Self {
            config,
            channels,
            relations,
            params: pf.finish(),
        })
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// In-batch linked pairs per relation (relations without links are
    /// omitted).
    pub fn pairs(&self, reg: &RelationalEntityGraph, batch: &BatchSubgraph) -> Vec<FdPairs> {
        self.relations
            .iter()
            .enumerate()
            .filter_map(|(k, rel)| {
                let (src, dst) = in_batch_links(reg, batch, rel.arc, &rel.source, &rel.target);
                (!src.is_empty()).then_some(FdPairs { relation: k, src, dst })
            })
            .collect()
    }

    /// Gathers pair embeddings and draws negatives: referenced-table rows of
    /// the batch holding a different entity than the true target, without
    /// replacement when enough exist. Pairs with no candidate are left out
    /// of the contrastive term.
    pub fn gather<R: Rng>(
        &self,
        tape: &mut Tape,
        pairs: &[FdPairs],
        embeddings: &BTreeMap<String, Var>,
        batch: &BatchSubgraph,
        rng: &mut R,
    ) -> Result<Vec<FdRelationBatch>> {
        let k = self.config.negatives;
        let mut out = Vec::new();
        for fp in pairs {
            let rel = &self.relations[fp.relation];
            let (Some(&hs), Some(&ht)) = (embeddings.get(&rel.source), embeddings.get(&rel.target)) else {
                continue;
            };
            let h_i = tape.gather(hs, &fp.src)?;
            let h_j = tape.gather(ht, &fp.dst)?;
            let globals = &batch.nodes[&rel.target].global;
            let mut rows = Vec::new();
            let mut slots: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (row, &j) in fp.dst.iter().enumerate() {
                let cands: Vec<usize> = (0..globals.len()).filter(|&c| globals[c] != globals[j]).collect();
                if cands.is_empty() {
                    log::debug!("{}: pair without negatives skipped", rel.label);
                    continue;
                }
                rows.push(row);
                if cands.len() >= k {
                    let mut picked = sample(rng, cands.len(), k).into_vec();
                    picked.sort_unstable();
                    for (slot, p) in slots.iter_mut().zip(picked) {
                        slot.push(cands[p]);
                    }
                } else {
                    for slot in &mut slots {
                        slot.push(cands[rng.gen_range(0..cands.len())]);
                    }
                }
            }
            let negatives = if rows.is_empty() {
                Vec::new()
            } else {
                slots
                    .iter()
                    .map(|idx| tape.gather(ht, idx))
                    .collect::<std::result::Result<_, _>>()?
            };
            out.push(FdRelationBatch {
                relation: fp.relation,
                h_i,
                h_j,
                contrast_rows: rows,
                negatives,
            });
        }
        Ok(out)
    }

    /// Both losses of one relation.
    pub fn relation_losses(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        rb: &FdRelationBatch,
    ) -> Result<(Var, Option<Var>, FdRelationStats)> {
        let rel = &self.relations[rb.relation];
        let diffs = tape.sub(rb.h_j, rb.h_i)?;
        let p = tape.param(store, rel.p);
        let s = tape.param(store, rel.s);
        let l_emb = loss_emb(tape, diffs, p, s)?;
        let mut stats = FdRelationStats {
            relation: rel.label.clone(),
            pairs: tape.shape(rb.h_i)[0],
            l_emb: tape.value(l_emb).item(),
            l_pair: None,
            pos_mean: None,
            neg_mean: None,
        };
        if rb.contrast_rows.is_empty() {
            return Ok((l_emb, None, stats));
        }
        let mlp = [rel.w1, rel.b1, rel.w2, rel.b2].map(|id| tape.param(store, id));
        let hi = tape.gather(rb.h_i, &rb.contrast_rows)?;
        let hj = tape.gather(rb.h_j, &rb.contrast_rows)?;
        let pos = score_pairs(tape, mlp, hi, hj)?;
        let mut negs = Vec::with_capacity(rb.negatives.len());
        for &hn in &rb.negatives {
            negs.push(score_pairs(tape, mlp, hi, hn)?);
        }
        let l_pair = loss_pair(tape, pos, &negs, self.config.tau)?;
        let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.len() as f64;
        stats.l_pair = Some(tape.value(l_pair).item());
        stats.pos_mean = Some(mean(tape.value(pos)));
        stats.neg_mean = Some(negs.iter().map(|&v| mean(tape.value(v))).sum::<f64>() / negs.len() as f64);
        Ok((l_emb, Some(l_pair), stats))
    }

    /// `β·mean L_emb + γ·mean L_pair`, each averaged over the relations
    /// that contribute to it.
    pub fn combine(&self, tape: &mut Tape, store: &ParamStore, batches: &[FdRelationBatch]) -> Result<FdOutput> {
        let (mut embs, mut pairs, mut stats) = (Vec::new(), Vec::new(), Vec::new());
        for rb in batches {
            let (e, p, s) = self.relation_losses(tape, store, rb)?;
            embs.push(e);
            pairs.extend(p);
            stats.push(s);
        }
        let mut total = None;
        for (terms, weight) in [(&embs, self.config.beta), (&pairs, self.config.gamma)] {
            if terms.is_empty() {
                continue;
            }
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t)?;
            }
            let term = tape.mul_const(acc, weight / terms.len() as f64);
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
        Ok(FdOutput { total, stats })
    }

    pub fn loss<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        reg: &RelationalEntityGraph,
        batch: &BatchSubgraph,
        embeddings: &BTreeMap<String, Var>,
        rng: &mut R,
    ) -> Result<FdOutput> {
        let pairs = self.pairs(reg, batch);
        let batches = self.gather(tape, &pairs, embeddings, batch, rng)?;
        self.combine(tape, store, &batches)
    }

    /// Re-orthonormalises every projection when configured.
    pub fn after_update(&self, store: &mut ParamStore) {
        if self.config.reorthonormalize {
            for rel in &self.relations {
                orthonormalize_columns(store.value_mut(rel.p));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{init_param, max_gradient_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn diff_is_target_minus_source() {
        let mut tape = Tape::new();
        let hi = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let hj = tape.leaf(t(&[1, 2], &[4.0, 6.0]));
        let d = tape.sub(hj, hi).unwrap();
        assert_eq!(tape.value(d).data(), &[3.0, 4.0]);
    }

    #[test]
    fn subspace_loss_examples() {
        let mut tape = Tape::new();
        let d = tape.leaf(t(&[1, 2], &[3.0, 4.0]));
        let p = tape.leaf(t(&[2, 1], &[1.0, 0.0]));
        let s = tape.leaf(Tensor::zeros(&[2]));
        let l = loss_emb(&mut tape, d, p, s).unwrap();
        assert_eq!(tape.value(l).item(), 16.0);

        let s = tape.leaf(Tensor::vector(vec![0.5, -2.0]));
        let d = tape.leaf(t(&[3, 2], &[0.5, -2.0, 0.5, -2.0, 0.5, -2.0]));
        let p = tape.leaf(init_param(&[2, 1], 1, 3));
        let l = loss_emb(&mut tape, d, p, s).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let e = tape.leaf(Tensor::zeros(&[0, 2]));
        let l = loss_emb(&mut tape, e, p, s).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn diffs_inside_orthonormal_subspace_vanish() {
        let (c, d, n) = (8, 3, 50);
        let mut p = init_param(&[c, d], c, 1);
        orthonormalize_columns(&mut p);
        let s = init_param(&[c], 1, 2);
        let z = init_param(&[n, d], 1, 3);
        let mut diffs = z.matmul(&p.transpose().unwrap()).unwrap();
        for (i, v) in diffs.data_mut().iter_mut().enumerate() {
            *v += s.data()[i % c];
        }
        let mut tape = Tape::new();
        let (dv, pv, sv) = (tape.leaf(diffs), tape.leaf(p), tape.leaf(s));
        let l = loss_emb(&mut tape, dv, pv, sv).unwrap();
        assert!(tape.value(l).item() < 1e-20, "{}", tape.value(l).item());
    }

    #[test]
    fn orthonormalize_gives_identity_gram() {
        let mut p = init_param(&[6, 3], 6, 4);
        orthonormalize_columns(&mut p);
        let g = p.transpose().unwrap().matmul(&p).unwrap();
        assert!(g.data().iter().zip(Tensor::identity(3).data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn contrastive_loss_examples() {
        let run = |pos: f64, neg: f64| {
            let mut tape = Tape::new();
            let p = tape.leaf(t(&[1, 1], &[pos]));
            let n = tape.leaf(t(&[1, 1], &[neg]));
            let l = loss_pair(&mut tape, p, &[n], 1.0).unwrap();
            tape.value(l).item()
        };
        assert!((run(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((run(2.0, 0.0) - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!((run(2.0, 0.0) - 0.126928).abs() < 1e-6);
        let big = run(1e3, 0.0);
        assert!((0.0..1e-300).contains(&big));
    }

    #[test]
    fn contrastive_loss_is_monotone() {
        let base = [0.3, -0.2, 0.1];
        let run = |v: [f64; 3]| {
            let mut tape = Tape::new();
            let p = tape.leaf(t(&[1, 1], &[v[0]]));
            let n: Vec<Var> = v[1..].iter().map(|&x| tape.leaf(t(&[1, 1], &[x]))).collect();
            let l = loss_pair(&mut tape, p, &n, 0.1).unwrap();
            tape.value(l).item()
        };
        let l0 = run(base);
        assert!(l0 > 0.0);
        for k in 0..3 {
            let mut v = base;
            v[k] += 0.05;
            if k == 0 {
                assert!(run(v) < l0);
            } else {
                assert!(run(v) > l0);
            }
        }
    }

    #[test]
    fn scorer_examples_and_oracle() {
        let c = 3;
        let w1 = init_param(&[c, c], c, 1);
        let b1 = init_param(&[c], 1, 2);
        let w2 = init_param(&[c, 1], c, 3);
        let b2 = Tensor::vector(vec![0.25]);
        let hi = init_param(&[1, c], 1, 4);
        let hj = init_param(&[1, c], 1, 5);
        let mut tape = Tape::new();
        let mlp = [&w1, &b1, &w2, &b2].map(|x| tape.leaf(x.clone()));
        let (vi, vj) = (tape.leaf(hi.clone()), tape.leaf(hj.clone()));
        let y = score_pairs(&mut tape, mlp, vi, vj).unwrap();
        let x: Vec<f64> = hi.data().iter().zip(hj.data()).map(|(a, b)| a - b).collect();
        let hidden: Vec<f64> = (0..c)
            .map(|o| ((0..c).map(|q| x[q] * w1.at(q, o)).sum::<f64>() + b1.data()[o]).max(0.0))
            .collect();
        let expect = (0..c).map(|o| hidden[o] * w2.at(o, 0)).sum::<f64>() + 0.25;
        assert!((tape.value(y).item() - expect).abs() < 1e-12);

        let zero = [&[c, c][..], &[c], &[c, 1], &[1]].map(|s| tape.leaf(Tensor::zeros(s)));
        let y = score_pairs(&mut tape, zero, vi, vj).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
        let same = score_pairs(&mut tape, mlp, vi, vi).unwrap();
        let same2 = score_pairs(&mut tape, mlp, vj, vj).unwrap();
        assert_eq!(tape.value(same).item(), tape.value(same2).item());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let inputs = [init_param(&[4, 3], 1, 1), init_param(&[3, 2], 3, 2), init_param(&[3], 1, 3)];
        let err = max_gradient_error(&inputs, 1e-6, 1e-6, |t, v| loss_emb(t, v[0], v[1], v[2]).map_err(|e| match e {
            FdError::Tensor(e) => e,
            FdError::Config(_) => unreachable!(),
        }))
        .unwrap();
        assert!(err < 1e-4, "{err}");

        let inputs = [
            init_param(&[3, 3], 3, 4),
            init_param(&[3], 1, 5),
            init_param(&[3, 1], 3, 6),
            init_param(&[1], 1, 7),
            init_param(&[4, 3], 1, 8),
            init_param(&[4, 3], 1, 9),
            init_param(&[4, 3], 1, 10),
            init_param(&[4, 3], 1, 11),
        ];
        let err = max_gradient_error(&inputs, 1e-5, 1e-6, |t, v| {
            let mlp = [v[0], v[1], v[2], v[3]];
            let pos = score_pairs(t, mlp, v[4], v[5]).map_err(unwrap_tensor)?;
            let n1 = score_pairs(t, mlp, v[4], v[6]).map_err(unwrap_tensor)?;
            let n2 = score_pairs(t, mlp, v[4], v[7]).map_err(unwrap_tensor)?;
            loss_pair(t, pos, &[n1, n2], 0.5).map_err(unwrap_tensor)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn unwrap_tensor(e: FdError) -> TensorError {
        match e {
            FdError::Tensor(e) => e,
            FdError::Config(m) => panic!("{m}"),
        }
    }

    mod with_graph {
        use super::*;
        use crate::rdb::fixtures::review_db;
        use crate::sampler::{sample_batch, SamplerConfig, SeedEntity};
        use crate::schemagraph::{construct_reg, RoleAssignment, SchemaGraph, enumerate_edge_triples, Role, DEFAULT_PATH_CAP};

        fn setup(cfg: FdConfig) -> (RelationalEntityGraph, BatchSubgraph, FdRegularizer, ParamStore) {
            let db = review_db();
            let sg = SchemaGraph::from_schema(&db.schema());
            let roles = RoleAssignment::uniform(&sg, &enumerate_edge_triples(&sg), Role::Learn);
            let reg = construct_reg(&db, &roles, DEFAULT_PATH_CAP).unwrap();
            let seeds = [1, 2].map(|entity| SeedEntity { entity, t_predict: i64::MAX });
            let batch = sample_batch(&reg, "user", &seeds, &SamplerConfig::new(8, 2, 0)).unwrap();
            let mut store = ParamStore::new();
            let fd = FdRegularizer::new(cfg, &reg, 4, 0, &mut store).unwrap();
            (reg, batch, fd, store)
        }

        fn embeddings(tape: &mut Tape, batch: &BatchSubgraph) -> BTreeMap<String, Var> {
            batch
                .nodes
                .iter()
                .enumerate()
                .map(|(k, (name, n))| (name.clone(), tape.leaf(init_param(&[n.len(), 4], 1, k as u64))))
                .collect()
        }

        #[test]
        fn pair_count_matches_link_oracle() {
            let (reg, batch, fd, _) = setup(FdConfig::default());
            assert_eq!(fd.relations.len(), 2);
            for rel in &fd.relations {
                let (Some(src), Some(dst)) = (batch.nodes.get(&rel.source), batch.nodes.get(&rel.target)) else {
                    continue;
                };
                let mut oracle = HashSet::new();
                for i in 0..src.len() {
                    for j in 0..dst.len() {
                        if src.seed[i] == dst.seed[j] && reg.fpk(rel.arc).target_of(src.global[i]) == Some(dst.global[j]) {
                            oracle.insert((src.global[i], dst.global[j]));
                        }
                    }
                }
                let (pi, pj) = in_batch_links(&reg, &batch, rel.arc, &rel.source, &rel.target);
                assert_eq!(pi.len(), oracle.len(), "{}", rel.label);
                for (i, j) in pi.iter().zip(&pj) {
                    assert!(oracle.contains(&(src.global[*i], dst.global[*j])));
                }
            }
            assert!(!fd.pairs(&reg, &batch).is_empty());
        }

        #[test]
        fn negatives_never_hit_the_true_target() {
            let (reg, batch, fd, _) = setup(FdConfig::default());
            let mut tape = Tape::new();
            let emb = embeddings(&mut tape, &batch);
            let pairs = fd.pairs(&reg, &batch);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let rbs = fd.gather(&mut tape, &pairs, &emb, &batch, &mut rng).unwrap();
            for (rb, fp) in rbs.iter().zip(&pairs) {
                let rel = &fd.relations[rb.relation];
                let target = tape.value(emb[&rel.target]).clone();
                assert_eq!(rb.negatives.len(), if rb.contrast_rows.is_empty() { 0 } else { 8 });
                for neg in &rb.negatives {
                    for (k, &row) in rb.contrast_rows.iter().enumerate() {
                        let truth = target.row(fp.dst[row]);
                        assert_ne!(tape.value(*neg).row(k), truth);
                    }
                }
            }
        }

        #[test]
        fn combined_loss_matches_components() {
            let cfg = FdConfig { beta: 1e-6, gamma: 0.1, ..Default::default() };
            let (reg, batch, fd, store) = setup(cfg);
            let mut tape = Tape::new();
            let emb = embeddings(&mut tape, &batch);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let out = fd.loss(&mut tape, &store, &reg, &batch, &emb, &mut rng).unwrap();
            let embs: Vec<f64> = out.stats.iter().map(|s| s.l_emb).collect();
            let pairs: Vec<f64> = out.stats.iter().filter_map(|s| s.l_pair).collect();
            let expect = 1e-6 * embs.iter().sum::<f64>() / embs.len() as f64
                + 0.1 * pairs.iter().sum::<f64>() / pairs.len() as f64;
            assert!((tape.value(out.total.unwrap()).item() - expect).abs() < 1e-12);
            assert!(out.stats.iter().all(|s| s.l_emb >= 0.0 && s.l_pair.is_none_or(|l| l > 0.0)));
        }

        #[test]
        fn weight_endpoints() {
            for (beta, gamma) in [(0.0, 0.0), (1.0, 0.0)] {
                let (reg, batch, fd, store) = setup(FdConfig { beta, gamma, ..Default::default() });
                let mut tape = Tape::new();
                let emb = embeddings(&mut tape, &batch);
                let mut rng = ChaCha8Rng::seed_from_u64(2);
                let out = fd.loss(&mut tape, &store, &reg, &batch, &emb, &mut rng).unwrap();
                let total = tape.value(out.total.unwrap()).item();
                let mean_emb = out.stats.iter().map(|s| s.l_emb).sum::<f64>() / out.stats.len() as f64;
                assert!((total - beta * mean_emb).abs() < 1e-12);
            }
        }

        #[test]
        fn config_validation() {
            assert!(FdConfig::default().validate(128).is_ok());
            assert_eq!(FdConfig::default().rank_for(2), 1);
            assert!(FdConfig { tau: 0.0, ..Default::default() }.validate(8).is_err());
            assert!(FdConfig { negatives: 0, ..Default::default() }.validate(8).is_err());
            assert!(FdConfig { rank: Some(8), ..Default::default() }.validate(8).is_err());
            assert!(FdConfig { beta: -1.0, ..Default::default() }.validate(8).is_err());
        }
    }
}

/// One relation's subspace and scorer trained directly on fixed, row-aligned
/// embeddings of linked pairs (the identity encoder), with no message
/// passing in between.
#[derive(Debug, Clone)]
pub struct FixedPairFit {
    pub store: ParamStore,
    pub rank: usize,
    pub tau: f64,
    p: ParamId,
    s: ParamId,
    mlp: [ParamId; 4],
}

/// Negative targets per row: `k` rows whose key differs from the row's own.
/// Rows without any candidate get no negatives.
pub fn mismatched_rows<R: Rng>(keys: &[usize], k: usize, rng: &mut R) -> Vec<Vec<usize>> {
    keys.iter()
        .map(|&own| {
            let cands: Vec<usize> = (0..keys.len()).filter(|&c| keys[c] != own).collect();
            if cands.is_empty() {
                return Vec::new();
            }
            (0..k).map(|_| cands[rng.gen_range(0..cands.len())]).collect()
        })
        .collect()
}

impl FixedPairFit {
    pub fn new(channels: usize, rank: usize, tau: f64, seed: u64) -> Result<Self> {
        if rank == 0 || rank > channels {
            return Err(FdError::Config(format!("rank {rank} must be in 1..={channels}")));
        }
        let mut store = ParamStore::new();
        let mut pf = ParamFactory::new(&mut store, seed, "fd.fixed.");
        let p = pf.glorot("p", &[channels, rank], channels);
        let s = pf.zeros("s", &[channels]);
        let mlp = [
            pf.glorot("w1", &[channels, channels], channels),
            pf.zeros("b1", &[channels]),
            pf.glorot("w2", &[channels, 1], channels),
            pf.zeros("b2", &[1]),
        ];
        pf.finish();
        Ok(Self { store, rank, tau, p, s, mlp })
    }

    fn emb_loss(&self, tape: &mut Tape, h_i: &Tensor, h_j: &Tensor) -> Result<Var> {
        let hi = tape.leaf(h_i.clone());
        let hj = tape.leaf(h_j.clone());
        let diffs = tape.sub(hj, hi)?;
        let p = tape.param(&self.store, self.p);
        let s = tape.param(&self.store, self.s);
        loss_emb(tape, diffs, p, s)
    }

    /// Full-batch Adam on the subspace loss; returns the final loss.
    pub fn fit_subspace(&mut self, h_i: &Tensor, h_j: &Tensor, steps: usize, lr: f64) -> Result<f64> {
        let mut adam = Adam::new(AdamConfig { lr, ..Default::default() }, vec![self.p, self.s]);
        for _ in 0..steps {
            let mut tape = Tape::new();
            let l = self.emb_loss(&mut tape, h_i, h_j)?;
            tape.backward(l, &mut self.store)?;
            adam.step(&mut self.store);
        }
        self.subspace_loss(h_i, h_j)
    }

    pub fn subspace_loss(&self, h_i: &Tensor, h_j: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.emb_loss(&mut tape, h_i, h_j)?;
        Ok(tape.value(l).item())
    }

    fn pair_loss_var(&self, tape: &mut Tape, h_i: &Tensor, h_j: &Tensor, negatives: &[Vec<usize>]) -> Result<Option<Var>> {
        let rows: Vec<usize> = (0..negatives.len()).filter(|&r| !negatives[r].is_empty()).collect();
        let Some(&first) = rows.first() else { return Ok(None) };
        let k = negatives[first].len();
        let mlp = self.mlp.map(|id| tape.param(&self.store, id));
        let hi_all = tape.leaf(h_i.clone());
        let hj_all = tape.leaf(h_j.clone());
        let hi = tape.gather(hi_all, &rows)?;
        let hj = tape.gather(hj_all, &rows)?;
        let pos = score_pairs(tape, mlp, hi, hj)?;
        let mut negs = Vec::with_capacity(k);
        for slot in 0..k {
            let idx: Vec<usize> = rows.iter().map(|&r| negatives[r][slot]).collect();
            let hn = tape.gather(hj_all, &idx)?;
            negs.push(score_pairs(tape, mlp, hi, hn)?);
        }
        Ok(Some(loss_pair(tape, pos, &negs, self.tau)?))
    }

    /// Minibatch Adam on the contrastive loss with `k` mismatched targets
    /// per pair, redrawn every step. `keys` identifies each row's target.
    #[allow(clippy::too_many_arguments)]
    pub fn fit_scorer<R: Rng>(
        &mut self,
        h_i: &Tensor,
        h_j: &Tensor,
        keys: &[usize],
        k: usize,
        steps: usize,
        lr: f64,
        rng: &mut R,
    ) -> Result<()> {
        let mut adam = Adam::new(AdamConfig { lr, ..Default::default() }, self.mlp.to_vec());
        for _ in 0..steps {
            let negatives = mismatched_rows(keys, k, rng);
            let mut tape = Tape::new();
            let Some(l) = self.pair_loss_var(&mut tape, h_i, h_j, &negatives)? else {
                return Ok(());
            };
            tape.backward(l, &mut self.store)?;
            adam.step(&mut self.store);
        }
        Ok(())
    }

    /// Contrastive loss against the given negatives; `None` without any.
    pub fn pair_loss(&self, h_i: &Tensor, h_j: &Tensor, negatives: &[Vec<usize>]) -> Result<Option<f64>> {
        let mut tape = Tape::new();
        Ok(self.pair_loss_var(&mut tape, h_i, h_j, negatives)?.map(|l| tape.value(l).item()))
    }

    /// Scorer output for each aligned row pair.
    pub fn scores(&self, h_i: &Tensor, h_j: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mlp = self.mlp.map(|id| tape.param(&self.store, id));
        let hi = tape.leaf(h_i.clone());
        let hj = tape.leaf(h_j.clone());
        let y = score_pairs(&mut tape, mlp, hi, hj)?;
        Ok(tape.value(y).data().to_vec())
    }
}
