use edge_moe::analysis::{inverse_normal_cdf, normal_cdf};
use edge_moe::expert::{min_norm_update, model_error, sample_delay, training_loss, DelayModel, ExpertState};
use edge_moe::gating::{gradient_from_cache, softmax};
use edge_moe::rng::seeded;
use edge_moe::task_gen::{generate_clusters, generate_task, verify_separation, TaskParams};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

/// `(prev, X, y)` with `s < p` and entries in a moderate range.
fn update_case() -> impl Strategy<Value = (DVector<f64>, DMatrix<f64>, DVector<f64>)> {
    (3usize..16)
        .prop_flat_map(|p| (Just(p), 1usize..p))
        .prop_flat_map(|(p, s)| {
            (
                prop::collection::vec(-3.0..3.0f64, p),
                prop::collection::vec(-2.0..2.0f64, p * s),
                prop::collection::vec(-5.0..5.0f64, s),
            )
                .prop_map(move |(w, x, y)| (DVector::from_vec(w), DMatrix::from_vec(p, s, x), DVector::from_vec(y)))
        })
}

/// Minimizes `||w - prev||` subject to `X^T w = y` through the full
/// Lagrangian system rather than the Gram-matrix shortcut.
fn kkt_oracle(prev: &DVector<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let (p, s) = x.shape();
    let k = DMatrix::from_fn(p + s, p + s, |i, j| match (i < p, j < p) {
        (true, true) => f64::from(u8::from(i == j)),
        (true, false) => x[(i, j - p)],
        (false, true) => x[(j, i - p)],
        (false, false) => 0.0,
    });
    let rhs = DVector::from_fn(p + s, |i, _| if i < p { prev[i] } else { y[i - p] });
    k.full_piv_lu().solve(&rhs).unwrap().rows(0, p).into_owned()
}

fn well_conditioned(x: &DMatrix<f64>) -> bool {
    let sv = x.clone().svd(false, false).singular_values;
    sv.min() > 1e-2 * sv.max()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn update_interpolates_minimally((prev, x, y) in update_case()) {
        prop_assume!(well_conditioned(&x));
        let w = min_norm_update(&prev, &x, &y).unwrap();
        let resid = (x.tr_mul(&w) - &y).amax();
        prop_assert!(resid <= 1e-8 * (1.0 + y.amax()), "residual {resid}");

        let step = &w - &prev;
        let coef = x.clone().svd(true, true).solve(&step, 1e-14).unwrap();
        let off = &step - &x * coef;
        prop_assert!(off.norm() <= 1e-8 * step.norm().max(1e-300));

        let oracle = kkt_oracle(&prev, &x, &y);
        prop_assert!((&w - &oracle).norm() <= 1e-8 * oracle.norm().max(1.0));
    }

    #[test]
    fn update_is_non_expansive((prev, x, _y) in update_case(), seed in any::<u64>()) {
        prop_assume!(well_conditioned(&x));
        // Any interpolant w* of the same data must not get farther away.
        use rand::Rng;
        let mut rng = seeded(seed);
        let star = DVector::from_fn(prev.len(), |_, _| rng.random_range(-3.0..3.0));
        let y = x.tr_mul(&star);
        let w = min_norm_update(&prev, &x, &y).unwrap();
        prop_assert!((&w - &star).norm() <= (&prev - &star).norm() + 1e-10);
    }

    #[test]
    fn losses_match_elementwise_sums((w, x, y) in update_case()) {
        let s = x.ncols();
        let direct: f64 = (0..s)
            .map(|j| {
                let pred: f64 = (0..x.nrows()).map(|i| x[(i, j)] * w[i]).sum();
                (pred - y[j]).powi(2)
            })
            .sum::<f64>() / s as f64;
        prop_assert!((training_loss(&w, &x, &y) - direct).abs() <= 1e-12 * (1.0 + direct));
        let truth = DVector::from_fn(w.len(), |i, _| y[i % s]);
        let err: f64 = w.iter().zip(truth.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        prop_assert!((model_error(&w, &truth) - err).abs() <= 1e-12 * (1.0 + err));
    }

    #[test]
    fn softmax_normalized_and_shift_invariant(
        h in prop::collection::vec(-30.0..30.0f64, 1..40),
        shift in -100.0..100.0f64,
    ) {
        let h = DVector::from_vec(h);
        let pi = softmax(&h);
        prop_assert!((pi.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(pi.iter().all(|&x| x >= 0.0));
        let shifted = softmax(&h.add_scalar(shift));
        prop_assert!((&shifted - &pi).amax() <= 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences(
        (p, m) in (2usize..10, 2usize..10),
        seed in any::<u64>(),
        delta in 0.0..4.0f64,
    ) {
        use rand::Rng;
        let mut rng = seeded(seed);
        let theta = DMatrix::from_fn(p, m, |_, _| rng.random_range(-0.5..0.5));
        let s = DVector::from_fn(p, |_, _| rng.random_range(-2.0..2.0));
        let chosen = rng.random_range(0..m);
        let pi = softmax(&theta.tr_mul(&s));
        let grad = gradient_from_cache(&pi, &s, chosen, delta);

        prop_assert!(grad.column_sum().amax() <= 1e-10 * (1.0 + grad.amax()));

        let loss = |t: &DMatrix<f64>| softmax(&t.tr_mul(&s))[chosen] * delta;
        let h = 1e-6;
        let fd = DMatrix::from_fn(p, m, |i, j| {
            let mut a = theta.clone();
            a[(i, j)] += h;
            let mut b = theta.clone();
            b[(i, j)] -= h;
            (loss(&a) - loss(&b)) / (2.0 * h)
        });
        let scale = grad.norm();
        prop_assert!((&fd - &grad).norm() <= 1e-5 * scale.max(1e-9), "fd {} vs {}", fd, grad);
    }

    #[test]
    fn generation_is_reproducible_and_consistent(seed in any::<u64>(), p in 4usize..16) {
        let a = generate_clusters(3, p, 0.5, &mut seeded(seed)).unwrap();
        let b = generate_clusters(3, p, 0.5, &mut seeded(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.check_invariants().is_ok());
        prop_assert!(verify_separation(&a, 8, &mut seeded(seed ^ 1)).unwrap().pass);

        let params = TaskParams { samples: p / 2, sigma_noise: 0.05, beta_max: 1.0, n_experts: 4 };
        let mut r1 = seeded(seed);
        let mut r2 = seeded(seed);
        for id in 1..=5 {
            let t = generate_task(&a, id, &params, &mut r1).unwrap();
            prop_assert_eq!(&t, &generate_task(&a, id, &params, &mut r2).unwrap());
            let resid = (t.features.tr_mul(&t.truth) - &t.labels).amax();
            prop_assert!(resid <= 1e-12 * (1.0 + t.labels.amax()));
            let expect = &a.signals[t.cluster] * t.beta;
            prop_assert_eq!(t.features.column(t.signal_pos).into_owned(), expect);
            prop_assert!(t.beta > 0.0 && t.beta <= 1.0);
        }
    }

    #[test]
    fn delays_respect_bounds(
        tr in (0u32..5).prop_flat_map(|lo| (Just(lo), lo + 1..lo + 8)),
        ex in (1u32..4).prop_flat_map(|lo| (Just(lo), lo..lo + 5)),
        seed in any::<u64>(),
    ) {
        let model = DelayModel { tr_bounds: tr, exec_bounds: ex, same_station_tr: tr.0, ..DelayModel::default() };
        prop_assert!(model.validate().is_ok());
        let expert = ExpertState::new(0, 3, ex);
        let mut rng = seeded(seed);
        for k in 0..200 {
            let d = sample_delay(&model, &expert, 0, k % 3, &mut rng);
            let total = d.total();
            prop_assert!(total >= model.min_delay() && total <= model.max_delay());
            if k % 3 == 0 {
                prop_assert_eq!(d.transmission, model.same_station_tr);
            }
        }
    }

    #[test]
    fn quantile_agrees_with_statrs(q in 1e-10..(1.0 - 1e-10f64)) {
        let oracle = Normal::standard().inverse_cdf(q);
        let z = inverse_normal_cdf(q).unwrap();
        prop_assert!((z - oracle).abs() <= 1e-8 * (1.0 + oracle.abs()), "{z} vs {oracle}");
        let back = Normal::standard().cdf(z);
        // statrs evaluates the CDF to roughly 1e-11.
        prop_assert!((normal_cdf(z) - back).abs() <= 1e-10, "{} vs {back}", normal_cdf(z));
    }
}
