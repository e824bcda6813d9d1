mod common;

use common::*;
use datatk::eval::{auc, class_detection, pearson};
use datatk::influence::{
    compute_scores, datainf_scores, exact_scores, gram_apply, lissa_step, EstimatorConfig,
    ExactConfig, ExactSolver, LissaConfig, LissaScaling, Method, QuerySelection,
};
use datatk::lab::{random_factored_store, random_store};
use datatk::store::{
    compute_damping, read_dump, validation_aggregate, write_dump, DampingVector, GradientStore,
    LayerSpec, RowMatrix,
};
use proptest::prelude::*;

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 1..4)
}

fn f32_store(n: usize, m: usize, dims: &[usize], values: &[f32]) -> GradientStore {
    let mut it = values.iter().cycle().map(|&x| x as f64);
    let mut take = |rows: usize, cols: usize| {
        RowMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| it.next().unwrap()).collect())
    };
    let layers = dims.iter().enumerate().map(|(l, &d)| LayerSpec::new(format!("blk.{l}"), d)).collect();
    let train = dims.iter().map(|&d| take(n, d)).collect();
    let query = dims.iter().map(|&d| take(m, d)).collect();
    GradientStore::new(layers, train, query).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dump_round_trip_is_bit_exact(
        n in 1usize..6,
        m in 1usize..4,
        dims in dims_strategy(),
        values in prop::collection::vec(-1e6f32..1e6, 1..50),
    ) {
        let store = f32_store(n, m, &dims, &values);
        let mut bytes = Vec::new();
        write_dump(&mut bytes, &store, None).unwrap();
        let (back, factored) = read_dump(&mut bytes.as_slice(), Some(bytes.len() as u64)).unwrap();
        prop_assert!(factored.is_none());
        for l in 0..store.num_layers() {
            for (a, b) in store.train(l).as_slice().iter().zip(back.train(l).as_slice()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            for (a, b) in store.query(l).as_slice().iter().zip(back.query(l).as_slice()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        prop_assert_eq!(back, store);
    }

    #[test]
    fn factored_dump_round_trip(seed in any::<u64>(), n in 1usize..5, a in 1usize..4, b in 1usize..4) {
        let (store, factored) = random_factored_store(seed, n, &[(a, b)], 2).unwrap();
        let store = store.to_f32_precision();
        let mut bytes = Vec::new();
        write_dump(&mut bytes, &store, Some(&factored)).unwrap();
        let (back, f) = read_dump(&mut bytes.as_slice(), None).unwrap();
        prop_assert_eq!(&back, &store);
        let f = f.unwrap();
        let rounded = |m: &RowMatrix| m.as_slice().iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
        prop_assert_eq!(f.layer(0).activations.as_slice(), &rounded(&factored.layer(0).activations)[..]);
        prop_assert_eq!(f.layer(0).preact_grads.as_slice(), &rounded(&factored.layer(0).preact_grads)[..]);
    }

    #[test]
    fn damping_is_homogeneous_of_degree_two(seed in any::<u64>(), dims in dims_strategy(), c in 0.01f64..100.0) {
        let store = random_store(seed, 7, &dims, 1, 1.0).unwrap();
        let base = compute_damping(&store, 0.1).unwrap();
        let scaled = compute_damping(&store.scaled(c).unwrap(), 0.1).unwrap();
        for (a, b) in base.values().iter().zip(scaled.values()) {
            prop_assert!((b - c * c * a).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn singleton_aggregate_is_the_row(seed in any::<u64>(), dims in dims_strategy(), m in 1usize..6, pick in any::<prop::sample::Index>()) {
        let store = random_store(seed, 3, &dims, m, 1.0).unwrap();
        let j = pick.index(m);
        let v = validation_aggregate(&store, Some(&[j])).unwrap();
        for l in 0..store.num_layers() {
            prop_assert_eq!(v.layer(l), store.query(l).row(j));
        }
    }

    #[test]
    fn datainf_exact_when_n_is_one(seed in any::<u64>(), dims in dims_strategy(), scale in 0.01f64..10.0) {
        let store = random_store(seed, 1, &dims, 2, scale).unwrap();
        let damping = compute_damping(&store, 0.1).unwrap();
        let q = QuerySelection::Each.resolve(&store).unwrap();
        let d = datainf_scores(&store, &q, &damping).unwrap();
        let e = exact_scores(&store, &q, &damping, &ExactConfig::default()).unwrap();
        prop_assert!(rel_err(d.as_slice(), e.as_slice()) < 1e-10);
    }

    #[test]
    fn datainf_exact_for_identical_gradients(seed in any::<u64>(), dims in dims_strategy(), n in 2usize..12) {
        let one = random_store(seed, 1, &dims, 2, 1.0).unwrap();
        let train = (0..dims.len())
            .map(|l| RowMatrix::from_rows(&vec![one.train_row(l, 0); n]))
            .collect();
        let query = (0..dims.len()).map(|l| one.query(l).clone()).collect();
        let store = GradientStore::new(one.layers().to_vec(), train, query).unwrap();
        let damping = compute_damping(&store, 0.1).unwrap();
        let q = QuerySelection::Each.resolve(&store).unwrap();
        let d = datainf_scores(&store, &q, &damping).unwrap();
        let e = exact_scores(&store, &q, &damping, &ExactConfig::default()).unwrap();
        prop_assert!(rel_err(d.as_slice(), e.as_slice()) < 1e-10);
    }

    #[test]
    fn scores_are_linear_in_the_query(
        seed in any::<u64>(),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        let (store, factored) = random_factored_store(seed, 6, &[(2, 2), (1, 3)], 2).unwrap();
        let damping = compute_damping(&store, 0.1).unwrap();
        let v1 = validation_aggregate(&store, Some(&[0])).unwrap();
        let v2 = validation_aggregate(&store, Some(&[1])).unwrap();
        let mix = v1.combine(alpha, &v2, beta);
        let config = EstimatorConfig::default();
        for method in [Method::HessianFree, Method::DataInf, Method::Exact, Method::Lissa, Method::Ekfac] {
            let s = compute_scores(method, &store, Some(&factored), &[v1.clone(), v2.clone(), mix.clone()], &damping, &config).unwrap();
            let expected: Vec<f64> = s.row(0).iter().zip(s.row(1)).map(|(a, b)| alpha * a + beta * b).collect();
            let scale = s.as_slice().iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
            let diff = s.row(2).iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(diff <= 1e-10 * scale * (alpha.abs() + beta.abs() + 1.0), "{} {}", method, diff);
        }
    }

    #[test]
    fn exact_solvers_agree(seed in any::<u64>(), n in 1usize..10, d in 1usize..12) {
        let store = random_store(seed, n, &[d], 1, 1.0).unwrap();
        let damping = compute_damping(&store, 0.1).unwrap();
        let q = QuerySelection::Aggregate.resolve(&store).unwrap();
        let run = |solver| exact_scores(&store, &q, &damping, &ExactConfig { solver, ..ExactConfig::default() }).unwrap();
        let primal = run(ExactSolver::Primal);
        prop_assert!(rel_err(run(ExactSolver::Woodbury).as_slice(), primal.as_slice()) < 1e-8);
        prop_assert!(rel_err(run(ExactSolver::Auto).as_slice(), primal.as_slice()) < 1e-8);
    }

    #[test]
    fn gram_operator_is_symmetric(seed in any::<u64>(), n in 1usize..10, d in 1usize..10) {
        let store = random_store(seed, n, &[d], 2, 1.0).unwrap();
        let x = store.query(0).row(0);
        let y = store.query(0).row(1);
        let xgy = vdot(x, &gram_apply(&store, 0, y));
        let ygx = vdot(y, &gram_apply(&store, 0, x));
        prop_assert!((xgy - ygx).abs() <= 1e-12 * (xgy.abs() + ygx.abs() + 1e-300));
    }

    #[test]
    fn lissa_step_fixes_the_solution(seed in any::<u64>(), n in 1usize..10, d in 1usize..8, s in 0.05f64..1.0) {
        let store = random_store(seed, n, &[d], 1, 0.5).unwrap();
        let lambda = compute_damping(&store, 0.1).unwrap().get(0);
        let v = store.query(0).row(0).to_vec();
        let inv = gauss_jordan_inverse(&damped_gram(&store, 0, lambda));
        let r_star: Vec<f64> = mat_vec(&inv, &v).iter().map(|x| x / s).collect();
        let next = lissa_step(&store, 0, &v, &r_star, lambda, s);
        prop_assert!(rel_err(&next, &r_star) < 1e-9);
    }

    #[test]
    fn lissa_matches_exact_after_many_iterations(seed in any::<u64>(), n in 2usize..10, d in 1usize..5) {
        let store = random_store(seed, n, &[d], 1, 0.3).unwrap();
        let damping = DampingVector::uniform(1.0, 1).unwrap();
        let q = QuerySelection::Aggregate.resolve(&store).unwrap();
        let config = LissaConfig { iterations: 300, scaling: LissaScaling::Auto };
        let l = compute_scores(Method::Lissa, &store, None, &q, &damping, &EstimatorConfig { lissa: config, ..Default::default() }).unwrap();
        prop_assert!(rel_err(l.as_slice(), &exact_oracle(&store, &q[0], &damping)) < 1e-6);
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps(
        scores in prop::collection::vec(-10.0f64..10.0, 4..30),
        flips in prop::collection::vec(any::<bool>(), 30),
    ) {
        let mut labels: Vec<bool> = flips[..scores.len()].to_vec();
        labels[0] = true;
        labels[1] = false;
        let base = auc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|x| (x / 4.0).exp() * 3.0 + x.powi(3)).collect();
        prop_assert!((auc(&mapped, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn pearson_is_invariant_under_positive_affine_maps(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
        a in 0.1f64..10.0,
        b in -10.0f64..10.0,
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(pearson(&x, &y).is_ok());
        let base = pearson(&x, &y).unwrap();
        let xt: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((pearson(&xt, &y).unwrap() - base).abs() < 1e-9);
        prop_assert!((pearson(&y, &xt).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn class_detection_negation_complements_auc(
        seed in any::<u64>(),
        n in 4usize..20,
    ) {
        let store = random_store(seed, n, &[1], 3, 1.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..3).map(|j| store.train(0).as_slice().iter().map(|x| x * (j as f64 + 1.0)).collect()).collect();
        let negated: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| -x).collect()).collect();
        let classes: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let queries = [0, 1, 0];
        let a = class_detection(&rows, &classes, &queries).unwrap();
        let b = class_detection(&negated, &classes, &queries).unwrap();
        for (x, y) in a.per_query_auc.iter().zip(&b.per_query_auc) {
            prop_assert!((x + y - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn aggregate_is_the_mean_of_rows() {
    let store = random_store(3, 2, &[4], 5, 1.0).unwrap();
    let v = validation_aggregate(&store, None).unwrap();
    for c in 0..4 {
        let mean = (0..5).map(|j| store.query(0).row(j)[c]).sum::<f64>() / 5.0;
        assert!((v.layer(0)[c] - mean).abs() <= 1e-12 * mean.abs().max(1e-12));
    }
}
