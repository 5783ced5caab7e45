//! Acceptance run: one line per criterion, non-zero exit if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relgate::fdreg::{loss_emb, loss_pair, mismatched_rows, score_pairs, FixedPairFit};
use relgate::model::{completion_conv, compute_gate, cooccurrence_conv, fuse};
use relgate::rdb::{canonical_form, ingest_bundle};
use relgate::sampler::SamplerConfig;
use relgate::schemagraph::gsl::{demo_add_counterexample, demo_prune_counterexample, enumerate_pruning_maps};
use relgate::schemagraph::{enumerate_edge_triples, Role, RoleAssignment, DEFAULT_PATH_CAP};
use relgate::synth::{
    gen_future_leak, gen_random, gen_subspace, gen_twohop, linked_attributes, subspace_columns, FutureLeakSpec,
    RandomSpec, SubspaceSpec, TwoHopSpec,
};
use relgate::tensor::{max_gradient_error, Reduce, Tape, Var};
use relgate::trainer::metrics::{average_precision_at_k, map_at_k, roc_auc, RankingQuery};
use relgate::{build_schema_graph, construct_reg, invert_reg, FdConfig, ModelConfig, RoleMode, Tensor, TrainConfig, Trainer, Workspace};

// Pinned tolerances and bounds.
const ROUNDTRIP_BUNDLES: u64 = 100;
const ROUNDTRIP_BUDGET: Duration = Duration::from_secs(60);
const GSL_BUDGET: Duration = Duration::from_secs(5);
const GRAD_INSTANCES: u64 = 100;
const GRAD_TOL_PRIMITIVE: f64 = 1e-4;
const GRAD_TOL_COMPOSITE: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const SEEDS: u64 = 5;
const NODE_ONLY_MAX_AUC: f64 = 0.60;
const EDGE_MIN_AUC: f64 = 0.90;
const SEPARATION_BUDGET: Duration = Duration::from_secs(600);
const EDGE_GATE_MIN: f64 = 0.6;
const EDGE_GATE_SEEDS: usize = 4;
const LEARN_AUC_SLACK: f64 = 0.01;
const SUBSPACE_MAX_LOSS: f64 = 1e-3;
const SUBSPACE_GAP: f64 = 10.0;
const PAIR_MIN_ACCURACY: f64 = 0.9;
const PAIR_NEGATIVES: usize = 8;
const CAUSAL_AUC: (f64, f64) = (0.45, 0.55);
const LEAK_MIN_AUC: f64 = 0.9;
const METRIC_INSTANCES: u64 = 1000;
const METRIC_TOL: f64 = 1e-12;
const METRIC_BUDGET: Duration = Duration::from_secs(30);

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(start: Instant, budget: Duration) -> Result<(), String> {
    let took = start.elapsed();
    if took <= budget {
        Ok(())
    } else {
        Err(format!("took {took:.1?}, budget {budget:?}"))
    }
}

fn roundtrip() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut checked = 0;
    for seed in 0..ROUNDTRIP_BUNDLES {
        let g = gen_random(&RandomSpec { seed, ..Default::default() }).map_err(|e| e.to_string())?;
        let path = dir.path().join(seed.to_string());
        g.write(&path).map_err(|e| e.to_string())?;
        let db = ingest_bundle(&path).map_err(|e| e.to_string())?;
        let expected = canonical_form(&g.db);
        if canonical_form(&db) != expected {
            return Err(format!("bundle {seed}: disk round trip differs"));
        }
        let sg = build_schema_graph(&db);
        let triples = enumerate_edge_triples(&sg);
        let assignments = [
            RoleAssignment::random(&sg, &triples, seed),
            RoleAssignment::uniform(&sg, &triples, Role::Edge),
            RoleAssignment::uniform(&sg, &triples, Role::Node),
            RoleAssignment::uniform(&sg, &triples, Role::Learn),
        ];
        for roles in &assignments {
            let reg = construct_reg(&db, roles, DEFAULT_PATH_CAP).map_err(|e| e.to_string())?;
            let back = invert_reg(&reg).map_err(|e| e.to_string())?;
            if canonical_form(&back) != expected {
                return Err(format!("bundle {seed}: graph round trip differs"));
            }
            checked += 1;
        }
    }
    within(start, ROUNDTRIP_BUDGET)?;
    Ok(format!("{checked} exact round trips over {ROUNDTRIP_BUNDLES} bundles in {:.1?}", start.elapsed()))
}

fn gsl() -> Outcome {
    let start = Instant::now();
    let demos = [demo_prune_counterexample(), demo_add_counterexample()];
    let verified = demos
        .iter()
        .all(|d| d.collision && d.input_1 != d.input_2 && d.output_1 == d.output_2 && d.distinguishable_with_tags);
    let e = enumerate_pruning_maps(3);
    within(start, GSL_BUDGET)?;
    check(
        verified && e.maps > 0 && e.maps_with_collision == e.maps,
        format!("demos verified: {verified}; {}/{} pruning maps collide", e.maps_with_collision, e.maps),
    )
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Contracts an arbitrary output to a scalar with fixed random weights.
fn contract(t: &mut Tape, y: Var, w: &Tensor) -> relgate::tensor::Result<Var> {
    let w = t.leaf(w.clone());
    let p = t.mul(y, w)?;
    Ok(t.sum_all(p))
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> relgate::tensor::Result<Var>>);

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let n = rng.gen_range(2..5);
    let m = rng.gen_range(2..5);
    let k = rng.gen_range(2..4);
    let mut r = |s: &[usize]| rand_tensor(rng, s);
    let wn_m = r(&[n, m]);
    let wn_2m = r(&[n, 2 * m]);
    let w_n = r(&[n]);
    let w_1m = r(&[m]);
    let segs: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let w_2m = r(&[2, m]);
    let idx: Vec<usize> = (0..n + 1).map(|i| (i * 7) % n).collect();
    let w_idx = r(&[n + 1, m]);
    let labels: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let mut cases: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($s:expr),*], $w:ident, |$t:ident, $v:ident| $body:expr) => {{
            let w = $w.clone();
            cases.push(($name, vec![$(r(&$s)),*], Box::new(move |$t: &mut Tape, $v: &[Var]| {
                let y = $body?;
                contract($t, y, &w)
            })));
        }};
    }
    case!("matmul", [[n, k], [k, m]], wn_m, |t, v| t.matmul(v[0], v[1]));
    case!("transpose", [[m, n]], wn_m, |t, v| t.transpose(v[0]));
    case!("add", [[n, m], [n, m]], wn_m, |t, v| t.add(v[0], v[1]));
    case!("sub", [[n, m], [n, m]], wn_m, |t, v| t.sub(v[0], v[1]));
    case!("mul", [[n, m], [n, m]], wn_m, |t, v| t.mul(v[0], v[1]));
    case!("add_row", [[n, m], [m]], wn_m, |t, v| t.add_row(v[0], v[1]));
    case!("mul_col", [[n, m], [n, 1]], wn_m, |t, v| t.mul_col(v[0], v[1]));
    case!("scale", [[n, m], [1]], wn_m, |t, v| t.scale(v[0], v[1]));
    case!("mul_const", [[n, m]], wn_m, |t, v| Ok::<_, relgate::tensor::TensorError>(t.mul_const(v[0], 1.7)));
    case!("add_const", [[n, m]], wn_m, |t, v| Ok::<_, relgate::tensor::TensorError>(t.add_const(v[0], -0.3)));
    case!("neg", [[n, m]], wn_m, |t, v| Ok::<_, relgate::tensor::TensorError>(t.neg(v[0])));
    case!("concat", [[n, m], [n, m]], wn_2m, |t, v| t.concat(&[v[0], v[1]], 1));
    case!("slice", [[n, m + 2]], wn_m, |t, v| t.slice(v[0], 1, 1, m));
    case!("sigmoid", [[n, m]], wn_m, |t, v| Ok::<_, relgate::tensor::TensorError>(t.sigmoid(v[0])));
    case!("relu", [[n, m]], wn_m, |t, v| Ok::<_, relgate::tensor::TensorError>(t.relu(v[0])));
    case!("tanh", [[n, m]], wn_m, |t, v| Ok::<_, relgate::tensor::TensorError>(t.tanh(v[0])));
    case!("abs", [[n, m]], wn_m, |t, v| Ok::<_, relgate::tensor::TensorError>(t.abs(v[0])));
    case!("sum", [[n, m]], w_n, |t, v| t.sum(v[0], 1));
    case!("mean", [[n, m]], w_1m, |t, v| t.mean(v[0], 0));
    case!("logsumexp", [[n, m]], w_n, |t, v| t.logsumexp(v[0], 1));
    let idx2 = idx.clone();
    case!("gather", [[n, m]], w_idx, |t, v| t.gather(v[0], &idx));
    case!("embedding", [[n, m]], w_idx, |t, v| t.embedding(v[0], &idx2));
    for (name, reduce) in [("segment_sum", Reduce::Sum), ("segment_mean", Reduce::Mean), ("segment_max", Reduce::Max)] {
        let segs = segs.clone();
        case!(name, [[n, m]], w_2m, |t, v| t.segment_reduce(v[0], &segs, 2, reduce));
    }
    cases.push(("sum_all", vec![r(&[n, m])], Box::new(|t, v| Ok(t.sum_all(v[0])))));
    cases.push(("mean_all", vec![r(&[n, m])], Box::new(|t, v| Ok(t.mean_all(v[0])))));
    cases.push(("sq_norm", vec![r(&[n, m])], Box::new(|t, v| Ok(t.sq_norm(v[0])))));
    cases.push((
        "bce_with_logits",
        vec![r(&[n, 1])],
        Box::new(move |t, v| t.bce_with_logits(v[0], &labels)),
    ));
    cases
}

fn composite_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> relgate::tensor::Result<Var>>)> {
    let c = rng.gen_range(2..4);
    let n = rng.gen_range(3..6);
    let targets = 2;
    let gbar = rng.gen_range(0.1..0.9);
    let seg: Vec<usize> = (0..n).map(|i| i % targets).collect();
    let mut r = |s: &[usize]| rand_tensor(rng, s);
    let w_out = r(&[targets, c]);
    let w_rows = r(&[n, c]);
    let (seg1, seg2) = (seg.clone(), seg);
    let (wo1, wo2, wr) = (w_out.clone(), w_out, w_rows);
    let k = 3;
    vec![
        (
            "cooccurrence message + mean aggregation",
            vec![r(&[3 * c, c]), r(&[n, c]), r(&[n, c]), r(&[n, c])],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let m = cooccurrence_conv(t, v[0], v[1], v[2], v[3]).expect("composite shapes are valid");
                let a = t.segment_reduce(m, &seg1, targets, Reduce::Mean)?;
                contract(t, a, &wo1)
            }) as Box<dyn Fn(&mut Tape, &[Var]) -> relgate::tensor::Result<Var>>,
        ),
        (
            "completion message + mean aggregation",
            vec![r(&[2 * c, c]), r(&[2 * c, 1]), r(&[2 * c, c]), r(&[n, c]), r(&[n, c]), r(&[n, c])],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let m = completion_conv(t, v[0], v[1], v[2], v[3], v[4], v[5]).expect("composite shapes are valid");
                let a = t.segment_reduce(m, &seg2, targets, Reduce::Mean)?;
                contract(t, a, &wo2)
            }),
        ),
        (
            "gate + fusion + activation",
            vec![r(&[2 * c, 1]), r(&[1]), r(&[n, c]), r(&[n, c])],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let g = compute_gate(t, v[0], v[1], v[2], v[3], gbar, 0.5, 0.7).expect("composite shapes are valid");
                let f = fuse(t, &[(v[2], v[3], g.running)]).expect("composite shapes are valid");
                let h = t.tanh(f);
                let y = contract(t, h, &wr)?;
                let gt = t.sum_all(g.tilde);
                t.add(y, gt)
            }),
        ),
        (
            "subspace loss",
            vec![r(&[n, c]), r(&[c, 1]), r(&[c])],
            Box::new(|t: &mut Tape, v: &[Var]| Ok(loss_emb(t, v[0], v[1], v[2]).expect("composite shapes are valid"))),
        ),
        (
            "scorer + contrastive loss",
            vec![r(&[c, c]), r(&[c]), r(&[c, 1]), r(&[1]), r(&[n, c]), r(&[n, c]), r(&[n * k, c])],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let mlp = [v[0], v[1], v[2], v[3]];
                let pos = score_pairs(t, mlp, v[4], v[5]).expect("composite shapes are valid");
                let mut negs = Vec::new();
                for s in 0..k {
                    let hn = t.slice(v[6], 0, s * n, n)?;
                    negs.push(score_pairs(t, mlp, v[4], hn).expect("composite shapes are valid"));
                }
                Ok(loss_pair(t, pos, &negs, 0.5).expect("composite shapes are valid"))
            }),
        ),
    ]
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let (mut worst_p, mut worst_c) = (0.0f64, 0.0f64);
    let (mut name_p, mut name_c) = ("", "");
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a7d);
    for _ in 0..GRAD_INSTANCES {
        for (name, inputs, f) in primitive_cases(&mut rng) {
            let err = max_gradient_error(&inputs, 1e-6, 1e-6, |t, v| f(t, v)).map_err(|e| format!("{name}: {e}"))?;
            if err > worst_p {
                (worst_p, name_p) = (err, name);
            }
        }
        for (name, inputs, f) in composite_cases(&mut rng) {
            let err = max_gradient_error(&inputs, 1e-5, 1e-6, |t, v| f(t, v)).map_err(|e| format!("{name}: {e}"))?;
            if err > worst_c {
                (worst_c, name_c) = (err, name);
            }
        }
    }
    within(start, GRAD_BUDGET)?;
    check(
        worst_p <= GRAD_TOL_PRIMITIVE && worst_c <= GRAD_TOL_COMPOSITE,
        format!(
            "worst relative error: primitives {worst_p:.2e} ({name_p}), composites {worst_c:.2e} ({name_c}) over {GRAD_INSTANCES} instances"
        ),
    )
}

fn twohop_run(roles: RoleMode, seed: u64) -> Result<(f64, Option<f64>), String> {
    let g = gen_twohop(&TwoHopSpec { seed, signal: 1.0, n_users: 2000, ..Default::default() }).map_err(|e| e.to_string())?;
    let task = g.task.as_ref().expect("twohop has a task");
    let ws = Workspace::new(&g.db, task, roles, DEFAULT_PATH_CAP, None).map_err(|e| e.to_string())?;
    let model = ModelConfig {
        channels: 32,
        layers: 1,
        cat_dim: 4,
        seed,
        ..Default::default()
    };
    let cfg = TrainConfig {
        roles,
        epochs: 10,
        batch_size: 64,
        lr: 5e-3,
        neighbor_samples: 64,
        patience: 100,
        seed,
        ..Default::default()
    };
    let mut t = Trainer::new(task, &ws, model, cfg).map_err(|e| e.to_string())?;
    let o = t.fit().map_err(|e| e.to_string())?;
    let auc = o.test.value.ok_or("test AUC undefined")?;
    let gate = o
        .structure
        .entries
        .iter()
        .find(|e| e.pattern == "cooccurrence" && e.w == task.entity_table)
        .map(|e| e.gbar);
    Ok((auc, gate))
}

struct TwoHopRuns {
    node: Vec<f64>,
    edge: Vec<f64>,
    learn: Vec<(f64, Option<f64>)>,
    took: Duration,
}

fn twohop_runs() -> Result<TwoHopRuns, String> {
    let start = Instant::now();
    let mut runs = TwoHopRuns {
        node: Vec::new(),
        edge: Vec::new(),
        learn: Vec::new(),
        took: Duration::ZERO,
    };
    for seed in 0..SEEDS {
        runs.node.push(twohop_run(RoleMode::AllNode, seed)?.0);
        runs.edge.push(twohop_run(RoleMode::AllEdge, seed)?.0);
    }
    runs.took = start.elapsed();
    for seed in 0..SEEDS {
        runs.learn.push(twohop_run(RoleMode::Learn, seed)?);
    }
    Ok(runs)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn separation(runs: &Result<TwoHopRuns, String>) -> Outcome {
    let runs = runs.as_ref().map_err(Clone::clone)?;
    if runs.took > SEPARATION_BUDGET {
        return Err(format!("took {:.1?}", runs.took));
    }
    let (node, edge) = (mean(&runs.node), mean(&runs.edge));
    check(
        node <= NODE_ONLY_MAX_AUC && edge >= EDGE_MIN_AUC,
        format!("mean test AUC node-only {node:.3}, edge {edge:.3} ({SEEDS} seeds, {:.1?})", runs.took),
    )
}

fn gating(runs: &Result<TwoHopRuns, String>) -> Outcome {
    let runs = runs.as_ref().map_err(Clone::clone)?;
    let gates: Vec<f64> = runs.learn.iter().map(|(_, g)| g.unwrap_or(f64::NAN)).collect();
    let edge_seeds = gates.iter().filter(|&&g| g >= EDGE_GATE_MIN).count();
    let learn = mean(&runs.learn.iter().map(|(a, _)| *a).collect::<Vec<_>>());
    let node = mean(&runs.node);
    check(
        edge_seeds >= EDGE_GATE_SEEDS && learn >= node - LEARN_AUC_SLACK,
        format!("gates {gates:.3?}: {edge_seeds}/{SEEDS} edge-dominant; AUC learned {learn:.3} vs node-only {node:.3}"),
    )
}

fn subspace_pairs(sigma: f64, seed: u64, channels: usize) -> Result<(Tensor, Tensor, Vec<usize>), String> {
    let spec = SubspaceSpec {
        n: 400,
        channels,
        d_true: 2,
        sigma,
        seed,
    };
    let (g, _) = gen_subspace(&spec).map_err(|e| e.to_string())?;
    let cols = subspace_columns(channels);
    let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
    linked_attributes(&g.db, "child", 0, &cols).map_err(|e| e.to_string())
}

fn table_level() -> Outcome {
    let c = 8;
    let (mut fit, mut short) = (Vec::new(), Vec::new());
    for seed in 0..SEEDS {
        let (hi, hj, _) = subspace_pairs(0.0, seed, c)?;
        let run = |d: usize| -> Result<f64, String> {
            let mut f = FixedPairFit::new(c, d, 0.1, seed).map_err(|e| e.to_string())?;
            f.fit_subspace(&hi, &hj, 2000, 0.01).map_err(|e| e.to_string())
        };
        fit.push(run(2)?.max(run(3)?));
        short.push(run(1)?);
    }
    let ok = (0..fit.len()).all(|i| fit[i] < SUBSPACE_MAX_LOSS && short[i] >= SUBSPACE_GAP * fit[i]);
    check(
        ok,
        format!("trained loss d>=d_true max {:.1e}, d=d_true-1 min {:.3}", fit.iter().cloned().fold(0.0, f64::max), short.iter().cloned().fold(f64::INFINITY, f64::min)),
    )
}

fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    Tensor::new(vec![idx.len(), c], idx.iter().flat_map(|&r| t.row(r).to_vec()).collect()).expect("shape matches")
}

fn entity_level() -> Outcome {
    let c = 8;
    let bound = (1.0 + PAIR_NEGATIVES as f64).ln();
    let (mut accs, mut losses) = (Vec::new(), Vec::new());
    for seed in 0..SEEDS {
        let (hi, hj, keys) = subspace_pairs(0.05, seed, c)?;
        let n = keys.len();
        let split = n * 3 / 4;
        let (tr, te): (Vec<usize>, Vec<usize>) = ((0..split).collect(), (split..n).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = FixedPairFit::new(c, 2, 0.1, seed).map_err(|e| e.to_string())?;
        let tr_keys: Vec<usize> = tr.iter().map(|&i| keys[i]).collect();
        f.fit_scorer(&rows(&hi, &tr), &rows(&hj, &tr), &tr_keys, PAIR_NEGATIVES, 2000, 0.003, &mut rng)
            .map_err(|e| e.to_string())?;
        let te_keys: Vec<usize> = te.iter().map(|&i| keys[i]).collect();
        let (ti, tj) = (rows(&hi, &te), rows(&hj, &te));
        let negs = mismatched_rows(&te_keys, PAIR_NEGATIVES, &mut rng);
        losses.push(f.pair_loss(&ti, &tj, &negs).map_err(|e| e.to_string())?.ok_or("no held-out negatives")?);
        let one: Vec<usize> = mismatched_rows(&te_keys, 1, &mut rng).iter().map(|v| v[0]).collect();
        let pos = f.scores(&ti, &tj).map_err(|e| e.to_string())?;
        let neg = f.scores(&ti, &rows(&tj, &one)).map_err(|e| e.to_string())?;
        accs.push(pos.iter().zip(&neg).filter(|(p, q)| p > q).count() as f64 / pos.len() as f64);
    }
    let acc = accs.iter().cloned().fold(f64::INFINITY, f64::min);
    let loss = losses.iter().cloned().fold(0.0, f64::max);
    check(
        acc > PAIR_MIN_ACCURACY && loss < bound,
        format!("min accuracy {acc:.3}, max held-out loss {loss:.4} < ln(1+k) = {bound:.4}"),
    )
}

fn causality() -> Outcome {
    let mut means = Vec::new();
    for causal in [true, false] {
        let mut aucs = Vec::new();
        for seed in 0..SEEDS {
            let g = gen_future_leak(&FutureLeakSpec { seed, ..Default::default() }).map_err(|e| e.to_string())?;
            let task = g.task.as_ref().expect("leak task");
            let ws = Workspace::new(&g.db, task, RoleMode::Learn, DEFAULT_PATH_CAP, None).map_err(|e| e.to_string())?;
            let model = ModelConfig {
                channels: 16,
                layers: 1,
                cat_dim: 4,
                seed,
                ..Default::default()
            };
            let cfg = TrainConfig {
                epochs: 10,
                batch_size: 64,
                lr: 5e-3,
                neighbor_samples: 16,
                causal,
                seed,
                ..Default::default()
            };
            let mut t = Trainer::new(task, &ws, model, cfg).map_err(|e| e.to_string())?;
            aucs.push(t.fit().map_err(|e| e.to_string())?.test.value.ok_or("undefined AUC")?);
        }
        means.push(mean(&aucs));
    }
    check(
        (CAUSAL_AUC.0..=CAUSAL_AUC.1).contains(&means[0]) && means[1] > LEAK_MIN_AUC,
        format!("mean test AUC causal {:.3}, causality off {:.3}", means[0], means[1]),
    )
}

fn alternating() -> Outcome {
    let g = gen_twohop(&TwoHopSpec {
        n_users: 200,
        n_products: 30,
        n_reviews: 800,
        signal: 1.0,
        seed: 7,
    })
    .map_err(|e| e.to_string())?;
    let task = g.task.as_ref().expect("twohop task");
    let ws = Workspace::new(&g.db, task, RoleMode::Learn, DEFAULT_PATH_CAP, None).map_err(|e| e.to_string())?;
    let model = ModelConfig {
        channels: 8,
        layers: 2,
        cat_dim: 2,
        seed: 1,
        ..Default::default()
    };
    let base = TrainConfig {
        epochs: 3,
        batch_size: 32,
        lr: 1e-2,
        neighbor_samples: 8,
        seed: 2,
        ..Default::default()
    };
    let mut t = Trainer::new(task, &ws, model.clone(), base.clone()).map_err(|e| e.to_string())?;
    let mut isolated = true;
    for epoch in 0..2 {
        let (m, f) = (t.param_hash(true), t.param_hash(false));
        t.phase_a(epoch).map_err(|e| e.to_string())?;
        isolated &= t.param_hash(false) == f && t.param_hash(true) != m;
        let m = t.param_hash(true);
        t.phase_b(epoch).map_err(|e| e.to_string())?;
        isolated &= t.param_hash(true) == m && t.param_hash(false) != f;
    }
    let zero = TrainConfig {
        fd: FdConfig {
            beta: 0.0,
            gamma: 0.0,
            ..Default::default()
        },
        ..base.clone()
    };
    let off = TrainConfig {
        fd_enabled: false,
        ..base
    };
    let mut a = Trainer::new(task, &ws, model.clone(), zero).map_err(|e| e.to_string())?;
    let mut b = Trainer::new(task, &ws, model, off).map_err(|e| e.to_string())?;
    let mut same = true;
    for epoch in 0..3 {
        let la = a.phase_a(epoch).map_err(|e| e.to_string())?.l_task;
        a.phase_b(epoch).map_err(|e| e.to_string())?;
        let lb = b.phase_a(epoch).map_err(|e| e.to_string())?.l_task;
        b.phase_b(epoch).map_err(|e| e.to_string())?;
        same &= la.map(f64::to_bits) == lb.map(f64::to_bits) && a.param_hash(true) == b.param_hash(true);
    }
    check(
        isolated && same,
        format!("phase isolation {isolated}; zero-weight trajectory bit-identical {same}"),
    )
}

fn auc_oracle(labels: &[f64], scores: &[f64]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1.0 && lj == 0.0 {
                pairs += 1.0;
                wins += match scores[i].partial_cmp(&scores[j]).expect("finite") {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn ap_oracle(q: &RankingQuery, k: usize) -> f64 {
    let n = q.scores.len();
    let position = |i: usize| {
        (0..n)
            .filter(|&j| q.scores[j] > q.scores[i] || (q.scores[j] == q.scores[i] && j < i))
            .count()
    };
    let relevant = q.relevant.iter().filter(|&&r| r).count();
    if relevant == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in (0..n).filter(|&i| q.relevant[i]) {
        let p = position(i);
        if p < k {
            let hits_above = (0..n).filter(|&j| q.relevant[j] && position(j) <= p).count();
            total += hits_above as f64 / (p + 1) as f64;
        }
    }
    total / relevant.min(k) as f64
}

fn metrics() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7);
    let (mut worst_auc, mut worst_map) = (0.0f64, 0.0f64);
    for _ in 0..METRIC_INSTANCES {
        let n = rng.gen_range(2..30);
        let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4))).collect();
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..8))).collect();
        match (roc_auc(&labels, &scores), auc_oracle(&labels, &scores)) {
            (Some(a), Some(b)) => worst_auc = worst_auc.max((a - b).abs()),
            (None, None) => {}
            other => return Err(format!("AUC definedness differs: {other:?}")),
        }
        let k = rng.gen_range(1..12);
        let queries: Vec<RankingQuery> = (0..rng.gen_range(1..5))
            .map(|_| {
                let m = rng.gen_range(1..20);
                RankingQuery {
                    scores: (0..m).map(|_| f64::from(rng.gen_range(0..6))).collect(),
                    relevant: (0..m).map(|_| rng.gen_bool(0.3)).collect(),
                }
            })
            .collect();
        let oracle = queries.iter().map(|q| ap_oracle(q, k)).sum::<f64>() / queries.len() as f64;
        worst_map = worst_map.max((map_at_k(&queries, k) - oracle).abs());
        for q in &queries {
            worst_map = worst_map.max((average_precision_at_k(q, k) - ap_oracle(q, k)).abs());
        }
    }
    within(start, METRIC_BUDGET)?;
    check(
        worst_auc <= METRIC_TOL && worst_map <= METRIC_TOL,
        format!("max deviation AUC {worst_auc:.1e}, MAP@K {worst_map:.1e} over {METRIC_INSTANCES} instances"),
    )
}

fn defaults() -> Outcome {
    let fd = TrainConfig::default().fd;
    let betas = fd.beta == 1e-6 && fd.gamma == 0.1;
    let mut budgets = true;
    for b in [1usize, 7, 64, 128, 1000] {
        let s = SamplerConfig::new(b, 6, 0);
        for i in 0..6 {
            budgets &= s.hop_budget(i) == b / 2usize.pow(i as u32);
        }
    }
    check(
        betas && budgets,
        format!("beta {:e}, gamma {}; hop budget floor(B / 2^i): {budgets}", fd.beta, fd.gamma),
    )
}

fn main() {
    let runs = twohop_runs();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("full-resolution round trip", Box::new(roundtrip)),
        ("graph-rewiring collisions", Box::new(gsl)),
        ("gradient correctness", Box::new(gradients)),
        ("planted two-hop separation", Box::new(|| separation(&runs))),
        ("learned gate recovers edge role", Box::new(|| gating(&runs))),
        ("table-level subspace loss", Box::new(table_level)),
        ("entity-level contrastive loss", Box::new(entity_level)),
        ("temporal causality", Box::new(causality)),
        ("alternating optimisation contract", Box::new(alternating)),
        ("metric oracles", Box::new(metrics)),
        ("shipped defaults", Box::new(defaults)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (tag, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {:>2}. {name}: {detail} [{:.1?}]", i + 1, start.elapsed());
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
