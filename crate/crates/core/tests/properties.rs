mod common;

use proptest::prelude::*;
use rand::SeedableRng;

use simmmdg::analysis::info::{alignment_gap_experiment, aligned_optimal_ce, common_components, entropy, mutual_information};
use simmmdg::analysis::retrieval::{retrieval_recall_at_k, BankPart, FeatureBank};
use simmmdg::diffcalc::{Graph, Tensor};
use simmmdg::harness::ExperimentConfig;
use simmmdg::losses::{contrastive_loss_of, distance_loss, DistanceKind, Toggles};
use simmmdg::model::{deserialize, init_model, serialize, ModelDims};
use simmmdg::synthgen::{random_joint, DiscreteJoint, Generator, GeneratorConfig, StreamKind, SynthRng};

fn finite_difference_ok(a: f64, n: f64) -> bool {
    let diff = (a - n).abs();
    diff < 1e-8 || diff / a.abs().max(n.abs()) < 1e-5
}

fn tensor(rows: usize, cols: usize, values: &[f64]) -> Tensor {
    Tensor::from_shape_vec((rows, cols), values[..rows * cols].to_vec()).unwrap()
}

/// Check a scalar-valued graph function of one input by central differences.
fn check_op(x: &Tensor, f: impl Fn(&mut Graph, simmmdg::diffcalc::NodeId) -> simmmdg::diffcalc::NodeId) -> Result<(), TestCaseError> {
    let mut g = Graph::new();
    let id = g.param(x.clone());
    let root = f(&mut g, id);
    g.backward(root).unwrap();
    let analytic = g.grad_or_zeros(id);
    let h = 1e-5;
    for idx in 0..x.len() {
        let eval = |d: f64| {
            let mut p = x.clone();
            p.as_slice_mut().unwrap()[idx] += d;
            let mut g2 = Graph::new();
            let id2 = g2.param(p);
            let r = f(&mut g2, id2);
            g2.scalar(r)
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let a = analytic.iter().copied().nth(idx).unwrap();
        prop_assert!(finite_difference_ok(a, numeric), "entry {idx}: {a} vs {numeric}");
    }
    Ok(())
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 12)
}

fn joint_strategy() -> impl Strategy<Value = DiscreteJoint> {
    (any::<u64>(), 1usize..3, 1usize..3, 2usize..3).prop_map(|(seed, a, b, c)| {
        let mut rng = SynthRng::seed_from_u64(seed);
        random_joint(&mut rng, &[a + 1, b], c).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn smooth_ops_match_finite_differences(v in values(), w in values()) {
        let other = tensor(3, 4, &w);
        let x = tensor(3, 4, &v);
        check_op(&x, |g, a| { let e = g.exp(a); g.sum(e) })?;
        check_op(&x, |g, a| { let b = g.constant(other.clone()); let m = g.mul(a, b).unwrap(); g.sum(m) })?;
        check_op(&x, |g, a| { let t = g.transpose(a); let b = g.constant(other.clone()); let m = g.matmul(t, b).unwrap(); let s = g.mul(m, m).unwrap(); g.sum(s) })?;
        check_op(&x, |g, a| { let l = g.logsumexp_rows(a, None).unwrap(); g.sum(l) })?;
        check_op(&x, |g, a| { let n = g.normalize_rows(a, 1e-12); let b = g.constant(other.clone()); let m = g.mul(n, b).unwrap(); g.sum(m) })?;
        check_op(&x, |g, a| { let (l, r) = g.slice_halves(a).unwrap(); g.sq_l2(l, r).unwrap() })?;
        check_op(&x, |g, a| { let s = g.mul(a, a).unwrap(); let s = g.add_scalar(s, 0.5); let q = g.sqrt(s).unwrap(); let l = g.log(q).unwrap(); g.mean(l) })?;
    }

    #[test]
    fn contrastive_is_permutation_invariant(
        seed in any::<u64>(),
        n in 2usize..10,
        tau in 0.05f64..2.0,
    ) {
        use rand::{Rng, seq::SliceRandom};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let pz: Vec<Vec<f64>> = order.iter().map(|&i| z[i].clone()).collect();
        let pl: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let a = contrastive_loss_of(&z, &labels, tau).unwrap();
        let b = contrastive_loss_of(&pz, &pl, tau).unwrap();
        prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        prop_assert!((a - common::supcon_reference(&z, &labels, tau)).abs() < 1e-10);
    }

    #[test]
    fn mutual_information_bounds(joint in joint_strategy()) {
        let ab = mutual_information(&joint, &[0], &[2]).unwrap();
        let ba = mutual_information(&joint, &[2], &[0]).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab >= 0.0);
        let h0 = entropy(&joint, &[0]).unwrap();
        let h2 = entropy(&joint, &[2]).unwrap();
        prop_assert!(ab <= h0.min(h2) + 1e-12);
    }

    #[test]
    fn alignment_gap_bound_holds(joint in joint_strategy()) {
        let r = alignment_gap_experiment(&joint).unwrap();
        prop_assert!(r.satisfies_bound(1e-9), "gap {} delta {}", r.gap, r.delta_p);
    }

    #[test]
    fn aligned_search_minimum_is_the_finest_grouping(joint in joint_strategy()) {
        let comp = common_components(&joint);
        let y = joint.target_index();
        let mut pc = std::collections::BTreeMap::new();
        let mut pcy = std::collections::BTreeMap::new();
        for (i, c) in comp.iter().enumerate() {
            if let Some(c) = c {
                *pc.entry(*c).or_insert(0.0) += joint.probs[i];
                *pcy.entry((*c, joint.support[i][y])).or_insert(0.0) += joint.probs[i];
            }
        }
        let h = |p: &f64| if *p > 0.0 { -p * p.ln() } else { 0.0 };
        let finest = pcy.values().map(h).sum::<f64>() - pc.values().map(h).sum::<f64>();
        let (best, _) = aligned_optimal_ce(&joint).unwrap();
        prop_assert!((best - finest.max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>(), n in 1usize..12) {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut bank = |part| {
            let f: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let l: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            FeatureBank::new(f, l, 0, part).unwrap()
        };
        let q = bank(BankPart::Shared);
        let g = bank(BankPart::Shared);
        let mut last = 0.0;
        for k in 1..=n + 2 {
            let r = retrieval_recall_at_k(&q, &g, k).unwrap();
            prop_assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn distance_decreases_when_halves_move_apart(v in values(), w in values(), c in 1.01f64..5.0) {
        let shared = tensor(3, 4, &v);
        let specific = tensor(3, 4, &w);
        prop_assume!((&shared - &specific).iter().any(|d| d.abs() > 1e-9));
        let value = |scale: f64| {
            let mut g = Graph::new();
            let s = g.constant(shared.clone());
            let moved = &shared + &((&specific - &shared) * scale);
            let p = g.constant(moved);
            let r = distance_loss(&mut g, &[(s, p)], DistanceKind::NegSqL2).unwrap();
            g.scalar(r)
        };
        prop_assert!(value(c) < value(1.0));
    }

    #[test]
    fn config_echo_round_trips(
        seed in any::<u32>(),
        lr in 1e-6f64..1e-1,
        tau in 0.01f64..2.0,
        epochs in 0usize..40,
        cl in any::<bool>(),
        fs in any::<bool>(),
    ) {
        let mut cfg = ExperimentConfig::desk();
        cfg.seed = seed as u64;
        cfg.optimizer.learning_rate = lr;
        cfg.tau = tau;
        cfg.epochs = epochs;
        cfg.toggles = Toggles::new(cl, fs, false, !cl);
        let mut back = ExperimentConfig::default();
        back.apply_toml(&cfg.echo()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn checkpoint_round_trips(seed in any::<u64>(), fs in any::<bool>()) {
        let dims = ModelDims { input_dims: vec![3, 2], ..common::tiny_dims() };
        let toggles = Toggles::new(true, fs, false, true);
        let state = init_model(dims.clone(), toggles, seed).unwrap();
        let back = deserialize(&serialize(&state), &dims, &toggles).unwrap();
        prop_assert_eq!(back.to_bytes(), state.to_bytes());
    }

    #[test]
    fn generator_is_deterministic(seed in any::<u64>(), domain in 0usize..3) {
        let cfg = GeneratorConfig { seed, ..GeneratorConfig::default() };
        let a = Generator::new(cfg.clone()).unwrap().sample_stream(domain, 20, StreamKind::Train).unwrap();
        let b = Generator::new(cfg).unwrap().sample_stream(domain, 20, StreamKind::Train).unwrap();
        prop_assert_eq!(a, b);
    }
}
