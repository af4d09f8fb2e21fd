#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use simmmdg::diffcalc::{Graph, NodeId, Tensor};
use simmmdg::losses::{
    build_contrastive_batch, build_objective, classification_loss, distance_loss, supervised_contrastive_loss,
    translation_loss, DistanceKind, LossWeights, ObjectiveSpec, Toggles,
};
use simmmdg::model::{init_model, ModelDims, ModelState};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Contrastive,
    Distance(DistanceKind),
    Translation,
    Classification,
    Total,
}

pub const ALL_KINDS: [LossKind; 7] = [
    LossKind::Contrastive,
    LossKind::Distance(DistanceKind::NegSqL2),
    LossKind::Distance(DistanceKind::NegL1),
    LossKind::Distance(DistanceKind::Cosine),
    LossKind::Translation,
    LossKind::Classification,
    LossKind::Total,
];

pub fn tiny_dims() -> ModelDims {
    ModelDims {
        input_dims: vec![3, 4, 2],
        embed_half: 2,
        encoder_hidden: 5,
        proj_hidden: 3,
        proj_out: 3,
        trans_hidden: 3,
        num_classes: 3,
    }
}

pub struct TinyProblem {
    pub state: ModelState,
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

/// Random tiny model plus a batch with every class appearing at least twice.
pub fn tiny_problem(seed: u64) -> TinyProblem {
    let dims = tiny_dims();
    let mut state = init_model(dims.clone(), Toggles::all(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Zero biases put dead-unit rows exactly on a relu kink.
    for p in state.params.iter_mut().filter(|p| p.name.ends_with("bias")) {
        p.value.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    let n = 6;
    let inputs = dims
        .input_dims
        .iter()
        .map(|&d| Tensor::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0)))
        .collect();
    let labels = vec![0, 1, 2, 0, 1, 2];
    TinyProblem { state, inputs, labels }
}

fn build(g: &mut Graph, p: &TinyProblem, state: &ModelState, kind: LossKind) -> (NodeId, Vec<NodeId>) {
    let b = state.bind(g, |_| true);
    let xs: Vec<NodeId> = p.inputs.iter().map(|x| g.constant(x.clone())).collect();
    let full: Vec<NodeId> = xs
        .iter()
        .enumerate()
        .map(|(k, &x)| state.encode(g, &b, k, x).unwrap())
        .collect();
    let halves: Vec<(NodeId, NodeId)> = full.iter().map(|&e| state.split(g, e).unwrap()).collect();
    let root = match kind {
        LossKind::Contrastive => {
            let shared: Vec<NodeId> = halves.iter().map(|h| h.0).collect();
            let batch = build_contrastive_batch(g, &b, state, &shared, &p.labels, 0.5).unwrap();
            supervised_contrastive_loss(g, &batch).unwrap()
        }
        LossKind::Distance(d) => distance_loss(g, &halves, d).unwrap(),
        LossKind::Translation => translation_loss(g, &b, state, &full).unwrap(),
        LossKind::Classification => {
            let logits = state.classify(g, &b, &full).unwrap();
            classification_loss(g, logits, &p.labels).unwrap()
        }
        LossKind::Total => {
            let spec = ObjectiveSpec {
                toggles: Toggles::all(),
                weights: LossWeights::default(),
                tau: 0.5,
                distance_kind: DistanceKind::Cosine,
            };
            build_objective(g, &b, state, &xs, &p.labels, &spec).unwrap().total
        }
    };
    (root, b.nodes)
}

pub fn loss_value(p: &TinyProblem, state: &ModelState, kind: LossKind) -> f64 {
    let mut g = Graph::new();
    let (root, _) = build(&mut g, p, state, kind);
    g.scalar(root)
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub failures: Vec<String>,
    pub max_rel: f64,
    pub max_abs: f64,
}

fn close(a: f64, n: f64) -> (bool, f64) {
    let diff = (a - n).abs();
    let rel = diff / a.abs().max(n.abs()).max(f64::MIN_POSITIVE);
    (diff <= ABS_FLOOR || rel < REL_TOL, if diff <= ABS_FLOOR { 0.0 } else { rel })
}

/// Central differences against the tape for every scalar of every parameter.
pub fn check_gradients(p: &TinyProblem, kind: LossKind) -> GradReport {
    let mut g = Graph::new();
    let (root, nodes) = build(&mut g, p, &p.state, kind);
    g.backward(root).unwrap();
    let mut report = GradReport {
        checked: 0,
        failures: Vec::new(),
        max_rel: 0.0,
        max_abs: 0.0,
    };
    for (pi, param) in p.state.params.iter().enumerate() {
        let analytic = g.grad_or_zeros(nodes[pi]);
        for idx in 0..param.value.len() {
            let eval = |delta: f64| {
                let mut s = p.state.clone();
                s.params[pi].value.as_slice_mut().unwrap()[idx] += delta;
                loss_value(p, &s, kind)
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic.iter().copied().nth(idx).unwrap();
            let (ok, rel) = close(a, numeric);
            report.checked += 1;
            report.max_rel = report.max_rel.max(rel);
            report.max_abs = report.max_abs.max((a - numeric).abs());
            if !ok {
                report
                    .failures
                    .push(format!("{kind:?} {}[{idx}]: analytic {a:e} numeric {numeric:e}", param.name));
            }
        }
    }
    report
}

/// Direct double-loop supervised contrastive loss over normalized rows.
pub fn supcon_reference(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let unit: Vec<Vec<f64>> = z
        .iter()
        .map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for i in 0..unit.len() {
        let positives: Vec<usize> = (0..unit.len()).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let denom: f64 = (0..unit.len())
            .filter(|&a| a != i)
            .map(|a| (dot(&unit[i], &unit[a]) / tau).exp())
            .sum();
        let mut s = 0.0;
        for &p in &positives {
            s += (dot(&unit[i], &unit[p]) / tau).exp().ln() - denom.ln();
        }
        total -= s / positives.len() as f64;
    }
    total
}

/// Compare two metrics CSVs: integers and text exactly, floats within `tol`.
pub fn metrics_match(a: &str, b: &str, tol: f64) -> Result<(), String> {
    let la: Vec<&str> = a.lines().collect();
    let lb: Vec<&str> = b.lines().collect();
    if la.len() != lb.len() {
        return Err(format!("{} rows vs {}", la.len(), lb.len()));
    }
    for (r, (x, y)) in la.iter().zip(&lb).enumerate() {
        let cx: Vec<&str> = x.split(',').collect();
        let cy: Vec<&str> = y.split(',').collect();
        if cx.len() != cy.len() {
            return Err(format!("row {r}: column count differs"));
        }
        for (u, v) in cx.iter().zip(&cy) {
            let same = match (u.parse::<i64>(), v.parse::<i64>()) {
                (Ok(p), Ok(q)) => p == q,
                _ => match (u.parse::<f64>(), v.parse::<f64>()) {
                    (Ok(p), Ok(q)) => (p - q).abs() <= tol,
                    _ => u == v,
                },
            };
            if !same {
                return Err(format!("row {r}: `{u}` vs `{v}`"));
            }
        }
    }
    Ok(())
}

/// Small but complete settings for CLI runs inside tests.
pub const QUICK: &[&str] = &[
    "--set",
    "data.train_per_domain=60",
    "--set",
    "data.test_per_domain=60",
    "--set",
    "train.epochs=2",
    "--set",
    "finetune.epochs=2",
];

pub fn cli(args: &[&str]) -> i32 {
    let mut all = vec!["simmmdg"];
    all.extend_from_slice(args);
    simmmdg::cli::main_with_args(all)
}
