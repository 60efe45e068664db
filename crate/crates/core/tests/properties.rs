use ltlab_core::autograd::Graph;
use ltlab_core::data::{make_exponential_counts, ClassPrior, LongTailProfile};
use ltlab_core::head::infer;
use ltlab_core::losses::{loss_value, LossConfig, LossKind};
use ltlab_core::metrics::bscore;
use ltlab_core::ot::{cost_matrix, sinkhorn, SinkhornConfig};
use ltlab_core::tensor::Tensor;
use ltlab_core::theory::{subadditivity_check, HypothesisSample};
use ltlab_core::{Error, Rng};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 2..=max_cols).prop_flat_map(|(r, c)| matrix(r, c, -10.0, 10.0))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in sized_matrix(6, 8)) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let s = g.softmax(v);
        let out = g.value(s);
        for i in 0..x.rows() {
            let row = out.row(i);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_commutes_with_permutation(x in sized_matrix(3, 8), seed in any::<u64>()) {
        let c = x.last_dim();
        let mut perm: Vec<usize> = (0..c).collect();
        Rng::new(seed).shuffle(&mut perm);
        let permuted: Vec<f64> = (0..x.rows()).flat_map(|i| perm.iter().map(move |&j| (i, j))).map(|(i, j)| x.at2(i, j)).collect();
        let px = Tensor::new(x.shape().to_vec(), permuted).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(x.clone()), g.constant(px));
        let (sa, sb) = (g.softmax(a), g.softmax(b));
        for i in 0..x.rows() {
            for (k, &j) in perm.iter().enumerate() {
                prop_assert!((g.value(sb).at2(i, k) - g.value(sa).at2(i, j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn losses_ignore_per_row_shifts(
        x in sized_matrix(5, 6),
        shifts in prop::collection::vec(-20.0..20.0f64, 5),
        seed in any::<u64>(),
    ) {
        let (n, c) = (x.rows(), x.last_dim());
        let mut rng = Rng::new(seed);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let counts: Vec<usize> = (0..c).map(|_| 1 + rng.below(300)).collect();
        let prior = ClassPrior::from_counts(&counts).unwrap();
        let mut shifted = x.clone();
        for i in 0..n {
            shifted.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|v| *v += shifts[i]);
        }
        for kind in [LossKind::Ce, LossKind::La, LossKind::Cb, LossKind::Ldam, LossKind::Focal] {
            let cfg = LossConfig::of(kind);
            let a = loss_value(&x, &labels, &prior, &cfg).unwrap();
            let b = loss_value(&shifted, &labels, &prior, &cfg).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{:?}: {} vs {}", kind, a, b);
        }
    }

    #[test]
    fn bscore_is_a_symmetric_mean(o in 0.0..100.0f64, m in 0.0..100.0f64) {
        let b = bscore(o, m);
        prop_assert_eq!(b, bscore(m, o));
        prop_assert!(b >= 0.0 && b <= 100.0);
        prop_assert!(b >= o.min(m) - 1e-12 && b <= o.max(m) + 1e-12);
        // harmonic never exceeds arithmetic
        prop_assert!(b <= (o + m) / 2.0 + 1e-12);
    }

    #[test]
    fn exponential_profile_shape(
        (imbalance, n_max) in (1.0..200.0f64).prop_flat_map(|f| (Just(f), (f.ceil() as usize)..2000)),
        c in 2usize..30,
    ) {
        let counts = make_exponential_counts(&LongTailProfile { num_classes: c, n_max, imbalance_factor: imbalance }).unwrap();
        prop_assert_eq!(counts.len(), c);
        prop_assert_eq!(counts[0], n_max);
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(counts.iter().all(|&n| n >= 1));
        let tail = (n_max as f64 / imbalance).round().max(1.0) as usize;
        prop_assert_eq!(counts[c - 1], tail);
    }

    #[test]
    fn ensemble_ignores_per_sample_shifts(
        s1 in matrix(4, 5, -5.0, 5.0),
        s2 in matrix(4, 5, -5.0, 5.0),
        k in prop::collection::vec(-50.0..50.0f64, 4),
    ) {
        let mut t1 = s1.clone();
        for i in 0..4 {
            t1.data_mut()[i * 5..(i + 1) * 5].iter_mut().for_each(|v| *v += k[i]);
        }
        prop_assert_eq!(infer(&s1, &s2).unwrap(), infer(&t1, &s2).unwrap());
    }

    #[test]
    fn cost_matrix_is_symmetric(x in matrix(4, 3, -2.0, 2.0), y in matrix(5, 3, -2.0, 2.0)) {
        let a = cost_matrix(&x, &y, 2.0).unwrap();
        let b = cost_matrix(&y, &x, 2.0).unwrap().transpose2().unwrap();
        prop_assert!(a.max_abs_diff(&b) == 0.0);
        prop_assert!(a.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn sinkhorn_plans_meet_their_marginals(x in matrix(4, 2, -1.0, 1.0), y in matrix(3, 2, -1.0, 1.0)) {
        let c = cost_matrix(&x, &y, 2.0).unwrap();
        let a = [0.1, 0.2, 0.3, 0.4];
        let b = [0.5, 0.25, 0.25];
        let cfg = SinkhornConfig { epsilon: 0.2, ..SinkhornConfig::default() };
        // Near-degenerate supports can stall the iteration; that must surface
        // as an error, never as an unconverged plan.
        let p = match sinkhorn(&a, &b, &c, &cfg) {
            Ok(p) => p,
            Err(Error::Convergence { violation, .. }) => {
                prop_assert!(violation >= cfg.marginal_tol);
                return Ok(());
            }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert!(p.plan.data().iter().all(|&v| v >= 0.0));
        for (i, &ai) in a.iter().enumerate() {
            prop_assert!((p.plan.row(i).iter().sum::<f64>() - ai).abs() < 1e-8);
        }
        for (j, &bj) in b.iter().enumerate() {
            prop_assert!(((0..4).map(|i| p.plan.at2(i, j)).sum::<f64>() - bj).abs() < 1e-8);
        }
    }

    #[test]
    fn subadditivity_holds_draw_by_draw(h1 in matrix(3, 6, -2.0, 2.0), h2 in matrix(4, 6, -2.0, 2.0), seed in any::<u64>()) {
        let (h1, h2) = (HypothesisSample::new(h1).unwrap(), HypothesisSample::new(h2).unwrap());
        let r = subadditivity_check(&h1, &h2, 200, &Rng::new(seed)).unwrap();
        prop_assert_eq!(r.draw_violations, 0);
        prop_assert!(r.holds);
    }
}
