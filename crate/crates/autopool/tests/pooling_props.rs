//! Property tests for the pooling operators.

use autopool::pooling::{
    pool_auto, pool_auto_backward, pool_max, pool_mean, pool_softmax, weight_bounds, AlphaVector,
    InstanceLikelihoods,
};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn column_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, 1..16)
}

/// Seeded sweep over 1000 (p, α, α+δ) triples: the pooled value never
/// decreases when α grows (its α-derivative is a weighted variance).
#[test]
fn monotone_in_alpha_over_1000_triples() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..1000 {
        let m = rng.random_range(1..20);
        let column: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let alpha = rng.random_range(-25.0..25.0);
        let delta = rng.random_range(0.0..8.0);
        let p = likelihoods(&column);
        let a0 = AlphaVector::unconstrained(Array1::from_elem(1, alpha));
        let a1 = AlphaVector::unconstrained(Array1::from_elem(1, alpha + delta));
        let (low, _) = pool_auto(&p, &a0).unwrap();
        let (high, _) = pool_auto(&p, &a1).unwrap();
        assert!(
            high.values[0] >= low.values[0] - 1e-12,
            "pooled value decreased: alpha {alpha} -> {} gave {} -> {}",
            alpha + delta,
            low.values[0],
            high.values[0]
        );
    }
}

fn likelihoods(column: &[f64]) -> InstanceLikelihoods {
    InstanceLikelihoods::new(
        Array2::from_shape_vec((column.len(), 1), column.to_vec()).unwrap(),
    )
    .unwrap()
}

fn column_min_max(column: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in column {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

proptest! {
    #[test]
    fn weights_sum_to_one_for_every_operator(column in column_strategy(), alpha in -30.0f64..30.0) {
        let p = likelihoods(&column);
        let a = AlphaVector::unconstrained(Array1::from_vec(vec![alpha]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for weights in [
            pool_max(&p, &mut rng).1,
            pool_mean(&p).1,
            pool_softmax(&p).1,
            pool_auto(&p, &a).unwrap().1,
        ] {
            let total: f64 = weights.weights.column(0).sum();
            prop_assert!((total - 1.0).abs() <= 1e-9, "weights sum {total}");
        }
    }

    #[test]
    fn pooled_output_stays_in_column_range(column in column_strategy(), alpha in -200.0f64..200.0) {
        let p = likelihoods(&column);
        let (lo, hi) = column_min_max(&column);
        let a = AlphaVector::unconstrained(Array1::from_vec(vec![alpha]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for pooled in [
            pool_max(&p, &mut rng).0,
            pool_mean(&p).0,
            pool_softmax(&p).0,
            pool_auto(&p, &a).unwrap().0,
        ] {
            prop_assert!(pooled.values[0] >= lo && pooled.values[0] <= hi);
        }
    }

    #[test]
    fn pooled_output_is_monotone_in_alpha(
        column in column_strategy(),
        alpha in -20.0f64..20.0,
        delta in 0.0f64..5.0,
    ) {
        let p = likelihoods(&column);
        let a0 = AlphaVector::unconstrained(Array1::from_vec(vec![alpha]));
        let a1 = AlphaVector::unconstrained(Array1::from_vec(vec![alpha + delta]));
        let (low, _) = pool_auto(&p, &a0).unwrap();
        let (high, _) = pool_auto(&p, &a1).unwrap();
        prop_assert!(high.values[0] >= low.values[0] - 1e-12);
    }

    #[test]
    fn weights_respect_closed_form_bounds(column in column_strategy(), alpha in -5.0f64..5.0) {
        let p = likelihoods(&column);
        let a = AlphaVector::unconstrained(Array1::from_vec(vec![alpha]));
        let (_, weights) = pool_auto(&p, &a).unwrap();
        let bounds = weight_bounds(alpha, column.len());
        for &w in weights.weights.column(0) {
            prop_assert!(w >= bounds.lower - 1e-12 && w <= bounds.upper + 1e-12,
                "weight {w} outside [{}, {}]", bounds.lower, bounds.upper);
        }
    }

    #[test]
    fn alpha_gradient_is_nonnegative(column in column_strategy(), alpha in -10.0f64..10.0) {
        let p = likelihoods(&column);
        let a = AlphaVector::unconstrained(Array1::from_vec(vec![alpha]));
        let grads = pool_auto_backward(&p, &a, Array1::from_vec(vec![1.0]).view()).unwrap();
        prop_assert!(grads.d_alpha[0] >= 0.0);
    }

    #[test]
    fn alpha_zero_matches_mean_bitwise(column in column_strategy()) {
        let p = likelihoods(&column);
        let zero = AlphaVector::unconstrained(Array1::from_vec(vec![0.0]));
        let (auto, auto_w) = pool_auto(&p, &zero).unwrap();
        let (mean, mean_w) = pool_mean(&p);
        prop_assert_eq!(auto.values[0].to_bits(), mean.values[0].to_bits());
        for j in 0..column.len() {
            prop_assert_eq!(auto_w.weights[[j, 0]].to_bits(), mean_w.weights[[j, 0]].to_bits());
        }
    }

    #[test]
    fn alpha_one_matches_softmax(column in column_strategy()) {
        let p = likelihoods(&column);
        let one = AlphaVector::unconstrained(Array1::from_vec(vec![1.0]));
        let (auto, _) = pool_auto(&p, &one).unwrap();
        let (softmax, _) = pool_softmax(&p);
        prop_assert!((auto.values[0] - softmax.values[0]).abs() <= 1e-12);
    }

    #[test]
    fn extreme_alpha_recovers_max_and_min(column in column_strategy()) {
        let p = likelihoods(&column);
        let (lo, hi) = column_min_max(&column);
        let a_hi = AlphaVector::unconstrained(Array1::from_vec(vec![100.0]));
        let a_lo = AlphaVector::unconstrained(Array1::from_vec(vec![-100.0]));
        let (pooled_hi, _) = pool_auto(&p, &a_hi).unwrap();
        let (pooled_lo, _) = pool_auto(&p, &a_lo).unwrap();
        // The limit statement needs a unique-enough extremum; require the
        // gap between the top two distinct values to be at least 0.1.
        let mut sorted = column.clone();
        sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
        if sorted.len() >= 2 && sorted[0] - sorted[1] >= 0.1 {
            prop_assert!((pooled_hi.values[0] - hi).abs() <= 1e-3);
        }
        let mut ascending = column.clone();
        ascending.sort_by(|x, y| x.partial_cmp(y).unwrap());
        if ascending.len() >= 2 && ascending[1] - ascending[0] >= 0.1 {
            prop_assert!((pooled_lo.values[0] - lo).abs() <= 1e-3);
        }
    }

    #[test]
    fn large_alpha_stays_finite(column in column_strategy(), alpha in prop::sample::select(vec![-500.0f64, -250.0, 250.0, 500.0])) {
        let p = likelihoods(&column);
        let a = AlphaVector::unconstrained(Array1::from_vec(vec![alpha]));
        let (pooled, weights) = pool_auto(&p, &a).unwrap();
        prop_assert!(pooled.values[0].is_finite());
        prop_assert!(weights.weights.iter().all(|w| w.is_finite()));
    }
}
