//! Pooling operators that aggregate per-instance likelihoods into a bag
//! likelihood: max, mean, soft-max, and the adaptive auto-pool family with a
//! learnable per-class sharpness parameter α.
//!
//! Auto-pool computes, per class, a soft-max weighted average
//! `P = Σ_j p_j · exp(α p_j) / Σ_z exp(α p_z)`. α = 0 recovers the unweighted
//! mean, α = 1 the soft-max weighted average, α → ±∞ max/min pooling. The
//! module also provides the analytic backward pass (through both the
//! instances and α), the closed-form instance-weight bounds, the
//! constrained-variant α cap derived from a maximum permissible instance
//! weight φ+, and the quadratic α penalty used by the regularized variant.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};

/// An m×C matrix of per-instance, per-class probabilities.
///
/// Construction validates that every entry lies in [0, 1] and that both
/// dimensions are at least 1; all pooling operators rely on these invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceLikelihoods {
    values: Array2<f64>,
}

impl InstanceLikelihoods {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (m, c) = values.dim();
        if m < 1 || c < 1 {
            return Err(Error::InvalidInput(format!(
                "instance likelihoods must be at least 1x1, got {m}x{c}"
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(Error::InvalidInput(format!(
                "instance likelihood {bad} outside [0, 1]"
            )));
        }
        Ok(Self { values })
    }

    /// Bag size m.
    pub fn num_instances(&self) -> usize {
        self.values.nrows()
    }

    /// Number of classes C.
    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn column(&self, class: usize) -> ArrayView1<'_, f64> {
        self.values.column(class)
    }
}

/// Constraint state attached to an α vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaConstraint {
    Unconstrained,
    /// Each α_c is clamped to `upper` after every optimizer step.
    Capped { upper: f64 },
    /// A quadratic penalty λ‖α‖² is added to the training objective.
    Regularized { lambda: f64 },
}

/// Per-class pooling sharpness parameters and their constraint state.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaVector {
    pub alpha: Array1<f64>,
    pub constraint: AlphaConstraint,
}

impl AlphaVector {
    pub fn unconstrained(alpha: Array1<f64>) -> Self {
        Self {
            alpha,
            constraint: AlphaConstraint::Unconstrained,
        }
    }

    pub fn capped(alpha: Array1<f64>, upper: f64) -> Result<Self> {
        if !upper.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "cap bound must be finite, got {upper}"
            )));
        }
        Ok(Self {
            alpha,
            constraint: AlphaConstraint::Capped { upper },
        })
    }

    pub fn regularized(alpha: Array1<f64>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "penalty coefficient must be nonnegative, got {lambda}"
            )));
        }
        Ok(Self {
            alpha,
            constraint: AlphaConstraint::Regularized { lambda },
        })
    }

    /// All-equal α vector with the given constraint.
    pub fn constant(value: f64, num_classes: usize, constraint: AlphaConstraint) -> Self {
        Self {
            alpha: Array1::from_elem(num_classes, value),
            constraint,
        }
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

/// Per-instance aggregation weights, one column per class, each summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingWeights {
    pub weights: Array2<f64>,
}

/// Length-C vector of pooled bag-level likelihoods.
#[derive(Debug, Clone, PartialEq)]
pub struct BagLikelihood {
    pub values: Array1<f64>,
}

/// Gradients of the pooled outputs: `d_instances[j][c] = upstream_c · ∂P_c/∂p_jc`
/// and `d_alpha[c] = upstream_c · ∂P_c/∂α_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingGradients {
    pub d_instances: Array2<f64>,
    pub d_alpha: Array1<f64>,
}

/// Closed-form bounds on any single instance weight for a given (α, m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightBounds {
    pub lower: f64,
    pub upper: f64,
}

fn check_alpha(p: &InstanceLikelihoods, a: &AlphaVector) -> Result<()> {
    if a.len() != p.num_classes() {
        return Err(Error::InvalidParameter(format!(
            "alpha length {} does not match {} classes",
            a.len(),
            p.num_classes()
        )));
    }
    if let Some(bad) = a.alpha.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "non-finite alpha entry {bad}"
        )));
    }
    Ok(())
}

/// Soft-max weighted average of one column with sharpness `alpha`.
///
/// Exponents are shifted by their column maximum before exponentiation so the
/// computation stays finite for large |α|. The pooled value is a convex
/// combination of the inputs; it is clamped to the column range to pin that
/// invariant against last-ulp rounding (which also makes the α-gradient of a
/// constant column exactly zero).
fn pool_auto_column(column: ArrayView1<'_, f64>, alpha: f64) -> (f64, Vec<f64>) {
    let m = column.len();
    let mut shift = f64::NEG_INFINITY;
    for &p in column {
        shift = shift.max(alpha * p);
    }
    let mut weights = vec![0.0; m];
    let mut total = 0.0;
    for (w, &p) in weights.iter_mut().zip(column) {
        *w = (alpha * p - shift).exp();
        total += *w;
    }
    for w in &mut weights {
        *w /= total;
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &p in column {
        lo = lo.min(p);
        hi = hi.max(p);
    }
    let mut pooled = 0.0;
    for (w, &p) in weights.iter().zip(column) {
        pooled += *w * p;
    }
    (pooled.clamp(lo, hi), weights)
}

fn mean_column(column: ArrayView1<'_, f64>) -> (f64, Vec<f64>) {
    // Same weighted-sum-then-clamp path as pool_auto_column so that α = 0
    // reproduces the mean bit for bit.
    let m = column.len();
    let w = 1.0 / m as f64;
    let weights = vec![w; m];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &p in column {
        lo = lo.min(p);
        hi = hi.max(p);
    }
    let mut pooled = 0.0;
    for &p in column {
        pooled += w * p;
    }
    (pooled.clamp(lo, hi), weights)
}

/// Max pooling. The weight column is an indicator of one maximizing instance;
/// ties are broken uniformly at random from the caller's seeded source.
pub fn pool_max<R: Rng + ?Sized>(
    p: &InstanceLikelihoods,
    rng: &mut R,
) -> (BagLikelihood, PoolingWeights) {
    let (m, c) = p.values.dim();
    let mut pooled = Array1::zeros(c);
    let mut weights = Array2::zeros((m, c));
    for class in 0..c {
        let column = p.column(class);
        let mut best = f64::NEG_INFINITY;
        for &v in column {
            best = best.max(v);
        }
        let ties: Vec<usize> = (0..m).filter(|&j| column[j] == best).collect();
        let pick = if ties.len() == 1 {
            ties[0]
        } else {
            ties[rng.random_range(0..ties.len())]
        };
        pooled[class] = best;
        weights[[pick, class]] = 1.0;
    }
    (BagLikelihood { values: pooled }, PoolingWeights { weights })
}

/// Mean pooling: every instance gets weight 1/m.
pub fn pool_mean(p: &InstanceLikelihoods) -> (BagLikelihood, PoolingWeights) {
    let (m, c) = p.values.dim();
    let mut pooled = Array1::zeros(c);
    let mut weights = Array2::zeros((m, c));
    for class in 0..c {
        let (value, col_weights) = mean_column(p.column(class));
        pooled[class] = value;
        for (j, w) in col_weights.into_iter().enumerate() {
            weights[[j, class]] = w;
        }
    }
    (BagLikelihood { values: pooled }, PoolingWeights { weights })
}

/// Soft-max weighted pooling; identical to [`pool_auto`] with α = 1.
pub fn pool_softmax(p: &InstanceLikelihoods) -> (BagLikelihood, PoolingWeights) {
    let ones = AlphaVector::unconstrained(Array1::ones(p.num_classes()));
    pool_auto(p, &ones).expect("all-ones alpha is always valid")
}

/// Auto-pool: per class c, weights w_j ∝ exp(α_c·p_j), pooled = Σ_j w_j p_j.
pub fn pool_auto(
    p: &InstanceLikelihoods,
    a: &AlphaVector,
) -> Result<(BagLikelihood, PoolingWeights)> {
    check_alpha(p, a)?;
    let (m, c) = p.values.dim();
    let mut pooled = Array1::zeros(c);
    let mut weights = Array2::zeros((m, c));
    for class in 0..c {
        let (value, col_weights) = pool_auto_column(p.column(class), a.alpha[class]);
        pooled[class] = value;
        for (j, w) in col_weights.into_iter().enumerate() {
            weights[[j, class]] = w;
        }
    }
    Ok((BagLikelihood { values: pooled }, PoolingWeights { weights }))
}

/// Analytic backward pass of [`pool_auto`].
///
/// With per-class weights w and pooled value P:
/// `∂P/∂p_k = w_k (1 + α (p_k − P))` and `∂P/∂α = Σ_j w_j (p_j − P)²`
/// (the weighted variance of the column, hence nonnegative). Both are scaled
/// by the per-class upstream gradient.
pub fn pool_auto_backward(
    p: &InstanceLikelihoods,
    a: &AlphaVector,
    upstream: ArrayView1<'_, f64>,
) -> Result<PoolingGradients> {
    check_alpha(p, a)?;
    let (m, c) = p.values.dim();
    if upstream.len() != c {
        return Err(Error::InvalidInput(format!(
            "upstream length {} does not match {} classes",
            upstream.len(),
            c
        )));
    }
    let mut d_instances = Array2::zeros((m, c));
    let mut d_alpha = Array1::zeros(c);
    for class in 0..c {
        let column = p.column(class);
        let alpha = a.alpha[class];
        let (pooled, weights) = pool_auto_column(column, alpha);
        let up = upstream[class];
        let mut variance = 0.0;
        for (j, (&w, &pv)) in weights.iter().zip(column).enumerate() {
            let centered = pv - pooled;
            d_instances[[j, class]] = up * w * (1.0 + alpha * centered);
            variance += w * centered * centered;
        }
        d_alpha[class] = up * variance;
    }
    Ok(PoolingGradients {
        d_instances,
        d_alpha,
    })
}

/// Closed-form bounds on any single instance weight of auto-pool.
///
/// For α ≥ 0 the interval is `[1/(1+e^α(m−1)), e^α/(e^α+m−1)]`; for α < 0 the
/// two endpoints swap roles. Computed via x = e^{−|α|} (lower = x/(x+m−1),
/// upper = 1/(1+(m−1)x)), which is algebraically identical and stays finite
/// for any α. For m = 1 the only weight is 1.
pub fn weight_bounds(alpha: f64, m: usize) -> WeightBounds {
    if m <= 1 {
        return WeightBounds {
            lower: 1.0,
            upper: 1.0,
        };
    }
    let rest = (m - 1) as f64;
    let x = (-alpha.abs()).exp();
    WeightBounds {
        lower: x / (x + rest),
        upper: 1.0 / (1.0 + rest * x),
    }
}

/// Upper bound on α implied by a maximum permissible instance weight φ+:
/// `ln(φ+/(1−φ+)) + ln(m−1)`. With φ+ = 0.5 this is ln(m−1), the constrained
/// variant's default cap.
pub fn cap_alpha_bound(phi_plus: f64, m: usize) -> Result<f64> {
    if m < 2 {
        return Err(Error::InvalidParameter(format!(
            "weight cap needs at least 2 instances, got {m}"
        )));
    }
    let inv_m = 1.0 / m as f64;
    if !(phi_plus >= inv_m && phi_plus < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "phi_plus {phi_plus} outside [1/m, 1) for m = {m}; a single weight cannot be below 1/m"
        )));
    }
    Ok((phi_plus / (1.0 - phi_plus)).ln() + ((m - 1) as f64).ln())
}

/// Dual form of [`cap_alpha_bound`]: the lower bound on α implied by a minimum
/// permissible instance weight 0 < φ− ≤ 1/m. Exposed for completeness; the
/// default constrained operator only applies the φ+ cap.
pub fn alpha_lower_bound(phi_minus: f64, m: usize) -> Result<f64> {
    if m < 2 {
        return Err(Error::InvalidParameter(format!(
            "weight floor needs at least 2 instances, got {m}"
        )));
    }
    let inv_m = 1.0 / m as f64;
    if !(phi_minus > 0.0 && phi_minus <= inv_m) {
        return Err(Error::InvalidParameter(format!(
            "phi_minus {phi_minus} outside (0, 1/m] for m = {m}; a single weight cannot exceed 1/m from below"
        )));
    }
    Ok((phi_minus / (1.0 - phi_minus)).ln() + ((m - 1) as f64).ln())
}

/// Clamp each α_c to its cap. Identity for non-capped vectors; idempotent.
pub fn project_alpha(mut a: AlphaVector) -> AlphaVector {
    if let AlphaConstraint::Capped { upper } = a.constraint {
        a.alpha.mapv_inplace(|v| v.min(upper));
    }
    a
}

/// Quadratic α penalty λ‖α‖² and its gradient 2λα.
///
/// Zero (with zero gradient) unless the vector's constraint is `Regularized`.
pub fn rap_penalty(a: &AlphaVector) -> (f64, Array1<f64>) {
    match a.constraint {
        AlphaConstraint::Regularized { lambda } => {
            let value = lambda * a.alpha.iter().map(|v| v * v).sum::<f64>();
            let grad = a.alpha.mapv(|v| 2.0 * lambda * v);
            (value, grad)
        }
        _ => (0.0, Array1::zeros(a.len())),
    }
}

/// The operator family: fixed max/mean/soft-max and the three adaptive
/// variants (plain, weight-capped, quadratically penalized).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingKind {
    Max,
    Mean,
    Softmax,
    Auto,
    Cap,
    Rap,
}

/// A pooling operator together with its α state.
///
/// Fixed operators carry a canonical α (0 for max/mean, 1 for soft-max) that
/// is never updated; adaptive operators start from `alpha_init` and are
/// trained jointly with the instance model.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingOperator {
    pub kind: PoolingKind,
    pub alpha: AlphaVector,
}

impl PoolingOperator {
    pub fn max(num_classes: usize) -> Self {
        Self {
            kind: PoolingKind::Max,
            alpha: AlphaVector::constant(0.0, num_classes, AlphaConstraint::Unconstrained),
        }
    }

    pub fn mean(num_classes: usize) -> Self {
        Self {
            kind: PoolingKind::Mean,
            alpha: AlphaVector::constant(0.0, num_classes, AlphaConstraint::Unconstrained),
        }
    }

    pub fn softmax(num_classes: usize) -> Self {
        Self {
            kind: PoolingKind::Softmax,
            alpha: AlphaVector::constant(1.0, num_classes, AlphaConstraint::Unconstrained),
        }
    }

    pub fn auto(num_classes: usize, alpha_init: f64) -> Self {
        Self {
            kind: PoolingKind::Auto,
            alpha: AlphaVector::constant(alpha_init, num_classes, AlphaConstraint::Unconstrained),
        }
    }

    /// Capped variant with the φ+ = 0.5 bound ln(m−1) for bag size m.
    /// The initial α is projected so the bound holds from the first step.
    pub fn cap(num_classes: usize, alpha_init: f64, bag_size: usize) -> Result<Self> {
        let upper = cap_alpha_bound(0.5, bag_size)?;
        let alpha = AlphaVector::constant(
            alpha_init,
            num_classes,
            AlphaConstraint::Capped { upper },
        );
        Ok(Self {
            kind: PoolingKind::Cap,
            alpha: project_alpha(alpha),
        })
    }

    pub fn rap(num_classes: usize, alpha_init: f64, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "penalty coefficient must be nonnegative, got {lambda}"
            )));
        }
        Ok(Self {
            kind: PoolingKind::Rap,
            alpha: AlphaVector::constant(
                alpha_init,
                num_classes,
                AlphaConstraint::Regularized { lambda },
            ),
        })
    }

    /// Whether α is a trainable parameter of this operator.
    pub fn learns_alpha(&self) -> bool {
        matches!(
            self.kind,
            PoolingKind::Auto | PoolingKind::Cap | PoolingKind::Rap
        )
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        p: &InstanceLikelihoods,
        rng: &mut R,
    ) -> Result<(BagLikelihood, PoolingWeights)> {
        match self.kind {
            PoolingKind::Max => Ok(pool_max(p, rng)),
            PoolingKind::Mean => Ok(pool_mean(p)),
            _ => pool_auto(p, &self.alpha),
        }
    }

    /// Gradients with respect to the instances (and α for adaptive kinds).
    ///
    /// Max and mean reuse the forward weights: the pooled value is linear in
    /// the instances at the selected weights. Adaptive kinds use the analytic
    /// auto-pool backward pass.
    pub fn backward(
        &self,
        p: &InstanceLikelihoods,
        upstream: ArrayView1<'_, f64>,
        forward_weights: &PoolingWeights,
    ) -> Result<PoolingGradients> {
        match self.kind {
            PoolingKind::Max | PoolingKind::Mean => {
                let (m, c) = p.values().dim();
                if upstream.len() != c {
                    return Err(Error::InvalidInput(format!(
                        "upstream length {} does not match {} classes",
                        upstream.len(),
                        c
                    )));
                }
                let mut d_instances = Array2::zeros((m, c));
                for class in 0..c {
                    for j in 0..m {
                        d_instances[[j, class]] =
                            upstream[class] * forward_weights.weights[[j, class]];
                    }
                }
                Ok(PoolingGradients {
                    d_instances,
                    d_alpha: Array1::zeros(c),
                })
            }
            _ => pool_auto_backward(p, &self.alpha, upstream),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn likelihoods(values: Array2<f64>) -> InstanceLikelihoods {
        InstanceLikelihoods::new(values).unwrap()
    }

    fn single_column(values: &[f64]) -> InstanceLikelihoods {
        let m = values.len();
        likelihoods(Array2::from_shape_vec((m, 1), values.to_vec()).unwrap())
    }

    /// Straight-line evaluation of the soft-max weighted average, used as the
    /// independent route against the shifted implementation.
    fn naive_auto(column: &[f64], alpha: f64) -> (f64, Vec<f64>) {
        let total: f64 = column.iter().map(|p| (alpha * p).exp()).sum();
        let weights: Vec<f64> = column.iter().map(|p| (alpha * p).exp() / total).collect();
        let pooled = weights.iter().zip(column).map(|(w, p)| w * p).sum();
        (pooled, weights)
    }

    #[test]
    fn likelihood_validation() {
        assert!(InstanceLikelihoods::new(array![[0.0, 1.0], [0.5, 0.25]]).is_ok());
        assert!(InstanceLikelihoods::new(array![[1.5]]).is_err());
        assert!(InstanceLikelihoods::new(array![[-0.1]]).is_err());
        assert!(InstanceLikelihoods::new(array![[f64::NAN]]).is_err());
        assert!(InstanceLikelihoods::new(Array2::zeros((0, 2))).is_err());
    }

    #[test]
    fn max_unique_maximizer() {
        let p = single_column(&[0.1, 0.9, 0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (pooled, weights) = pool_max(&p, &mut rng);
        assert_eq!(pooled.values[0], 0.9);
        assert_eq!(weights.weights.column(0).to_vec(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn max_tie_is_one_hot_on_a_tied_index() {
        let p = single_column(&[0.5, 0.5]);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (pooled, weights) = pool_max(&p, &mut rng);
            assert_eq!(pooled.values[0], 0.5);
            let col = weights.weights.column(0);
            assert_eq!(col.sum(), 1.0);
            assert!(col.iter().filter(|&&w| w == 1.0).count() == 1);
        }
        // Both tied indices are reachable across seeds.
        let mut seen = [false, false];
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, weights) = pool_max(&p, &mut rng);
            for (j, hit) in seen.iter_mut().enumerate() {
                if weights.weights[[j, 0]] == 1.0 {
                    *hit = true;
                }
            }
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn max_singleton_bag() {
        let p = single_column(&[0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (pooled, weights) = pool_max(&p, &mut rng);
        assert_eq!(pooled.values[0], 0.0);
        assert_eq!(weights.weights[[0, 0]], 1.0);
    }

    #[test]
    fn mean_examples() {
        let (pooled, weights) = pool_mean(&single_column(&[0.2, 0.8]));
        assert_abs_diff_eq!(pooled.values[0], 0.5, epsilon = 1e-15);
        assert_eq!(weights.weights[[0, 0]], 0.5);

        let (pooled, _) = pool_mean(&single_column(&[1.0, 1.0, 1.0, 1.0]));
        assert_eq!(pooled.values[0], 1.0);

        let (pooled, _) = pool_mean(&single_column(&[0.1, 0.2, 0.3]));
        assert_abs_diff_eq!(pooled.values[0], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn softmax_zero_one_column() {
        // Independent route: w = [1/(1+e), e/(1+e)], pooled = e/(1+e).
        let e = std::f64::consts::E;
        let (pooled, weights) = pool_softmax(&single_column(&[0.0, 1.0]));
        assert_relative_eq!(weights.weights[[0, 0]], 1.0 / (1.0 + e), max_relative = 1e-12);
        assert_relative_eq!(weights.weights[[1, 0]], e / (1.0 + e), max_relative = 1e-12);
        assert_relative_eq!(pooled.values[0], e / (1.0 + e), max_relative = 1e-12);
        // Five-decimal figures for the same quantities.
        assert_abs_diff_eq!(weights.weights[[0, 0]], 0.26894, epsilon = 5e-6);
        assert_abs_diff_eq!(pooled.values[0], 0.73106, epsilon = 5e-6);
    }

    #[test]
    fn softmax_constant_column_and_bounds() {
        let (pooled, _) = pool_softmax(&single_column(&[0.37, 0.37, 0.37]));
        assert_eq!(pooled.values[0], 0.37);

        for m in 2..10 {
            let column: Vec<f64> = (0..m).map(|j| j as f64 / m as f64).collect();
            let (_, weights) = pool_softmax(&single_column(&column));
            let bounds = weight_bounds(1.0, m);
            for &w in weights.weights.column(0) {
                assert!(w >= bounds.lower - 1e-12 && w <= bounds.upper + 1e-12);
            }
        }
    }

    #[test]
    fn auto_matches_naive_formula() {
        let column = [0.2, 0.8];
        let a = AlphaVector::unconstrained(array![2.0]);
        let (pooled, weights) = pool_auto(&single_column(&column), &a).unwrap();
        let (naive_pooled, naive_weights) = naive_auto(&column, 2.0);
        assert_relative_eq!(pooled.values[0], naive_pooled, max_relative = 1e-14);
        assert_relative_eq!(weights.weights[[0, 0]], naive_weights[0], max_relative = 1e-14);
        assert_relative_eq!(weights.weights[[1, 0]], naive_weights[1], max_relative = 1e-14);
        // Five-decimal figures.
        assert_abs_diff_eq!(weights.weights[[0, 0]], 0.23148, epsilon = 5e-6);
        assert_abs_diff_eq!(weights.weights[[1, 0]], 0.76852, epsilon = 5e-6);
        assert_abs_diff_eq!(pooled.values[0], 0.66111, epsilon = 5e-6);
    }

    #[test]
    fn auto_alpha_zero_is_mean_bit_for_bit() {
        let columns = [
            vec![0.2, 0.8],
            vec![0.1, 0.2, 0.3, 0.7],
            vec![0.33, 0.44, 0.55],
        ];
        for col in &columns {
            let p = single_column(col);
            let zero = AlphaVector::unconstrained(array![0.0]);
            let (auto, auto_w) = pool_auto(&p, &zero).unwrap();
            let (mean, mean_w) = pool_mean(&p);
            assert_eq!(auto.values[0].to_bits(), mean.values[0].to_bits());
            for j in 0..col.len() {
                assert_eq!(
                    auto_w.weights[[j, 0]].to_bits(),
                    mean_w.weights[[j, 0]].to_bits()
                );
            }
        }
    }

    #[test]
    fn auto_extreme_alpha_approaches_max_and_min() {
        let p = single_column(&[0.2, 0.8]);
        let hi = AlphaVector::unconstrained(array![100.0]);
        let lo = AlphaVector::unconstrained(array![-100.0]);
        let (pooled_hi, _) = pool_auto(&p, &hi).unwrap();
        let (pooled_lo, _) = pool_auto(&p, &lo).unwrap();
        assert!((pooled_hi.values[0] - 0.8).abs() <= 1e-3);
        assert!((pooled_lo.values[0] - 0.2).abs() <= 1e-3);
    }

    #[test]
    fn auto_rejects_non_finite_alpha() {
        let p = single_column(&[0.2, 0.8]);
        for bad in [f64::NAN, f64::INFINITY, f64::NEG_INFINITY] {
            let a = AlphaVector::unconstrained(array![bad]);
            assert!(matches!(
                pool_auto(&p, &a),
                Err(Error::InvalidParameter(_))
            ));
        }
    }

    #[test]
    fn auto_stays_finite_at_alpha_500() {
        let p = single_column(&[0.0, 0.25, 0.5, 0.75, 1.0]);
        for alpha in [500.0, -500.0] {
            let a = AlphaVector::unconstrained(array![alpha]);
            let (pooled, weights) = pool_auto(&p, &a).unwrap();
            assert!(pooled.values[0].is_finite());
            assert!(weights.weights.iter().all(|w| w.is_finite()));
            let total: f64 = weights.weights.column(0).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
        }
    }

    /// Central finite difference of the pooled value along one coordinate.
    fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, step: f64) -> f64 {
        (f(x + step) - f(x - step)) / (2.0 * step)
    }

    #[test]
    fn backward_alpha_gradient_matches_finite_difference() {
        // Oracle: d pooled / d alpha by central difference, step 1e-5.
        let column = [0.2, 0.8];
        let fd = central_diff(
            |a| naive_auto(&column, a).0,
            2.0,
            1e-5,
        );
        let p = single_column(&column);
        let a = AlphaVector::unconstrained(array![2.0]);
        let grads = pool_auto_backward(&p, &a, array![1.0].view()).unwrap();
        assert_relative_eq!(grads.d_alpha[0], fd, max_relative = 1e-7);
        // Frozen oracle value (the weighted variance of the column at α = 2).
        assert_abs_diff_eq!(grads.d_alpha[0], 0.0640420, epsilon = 5e-7);
    }

    #[test]
    fn backward_alpha_zero_gives_exact_mean_gradient() {
        let p = single_column(&[0.15, 0.4, 0.95]);
        let a = AlphaVector::unconstrained(array![0.0]);
        let grads = pool_auto_backward(&p, &a, array![1.0].view()).unwrap();
        for j in 0..3 {
            assert_eq!(grads.d_instances[[j, 0]].to_bits(), (1.0f64 / 3.0).to_bits());
        }
    }

    #[test]
    fn backward_constant_column_has_zero_alpha_gradient() {
        for alpha in [-3.0, 0.0, 1.0, 7.5] {
            let p = single_column(&[0.42, 0.42, 0.42, 0.42]);
            let a = AlphaVector::unconstrained(array![alpha]);
            let grads = pool_auto_backward(&p, &a, array![1.0].view()).unwrap();
            assert_eq!(grads.d_alpha[0], 0.0);
        }
    }

    #[test]
    fn backward_instance_gradients_match_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let m = rng.random_range(2..8);
            let alpha = rng.random_range(-4.0..4.0);
            let column: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..0.99)).collect();
            let p = single_column(&column);
            let a = AlphaVector::unconstrained(array![alpha]);
            let grads = pool_auto_backward(&p, &a, array![1.0].view()).unwrap();
            for k in 0..m {
                let fd = central_diff(
                    |v| {
                        let mut perturbed = column.clone();
                        perturbed[k] = v;
                        naive_auto(&perturbed, alpha).0
                    },
                    column[k],
                    1e-5,
                );
                let analytic = grads.d_instances[[k, 0]];
                let denom = fd.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (analytic - fd).abs() / denom <= 1e-5,
                    "m={m} alpha={alpha} k={k}: analytic {analytic} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn weight_bounds_examples() {
        let e = std::f64::consts::E;
        let b = weight_bounds(1.0, 2);
        assert_relative_eq!(b.lower, 1.0 / (1.0 + e), max_relative = 1e-12);
        assert_relative_eq!(b.upper, e / (e + 1.0), max_relative = 1e-12);

        for m in 1..20 {
            let b = weight_bounds(0.0, m);
            assert_eq!(b.lower, 1.0 / m as f64);
            assert_eq!(b.upper, 1.0 / m as f64);
        }

        let b = weight_bounds(2.0, 3);
        let e2 = (2.0f64).exp();
        assert_relative_eq!(b.lower, 1.0 / (1.0 + 2.0 * e2), max_relative = 1e-12);
        assert_relative_eq!(b.upper, e2 / (e2 + 2.0), max_relative = 1e-12);
        assert_abs_diff_eq!(b.lower, 0.06337, epsilon = 5e-5);
        assert_abs_diff_eq!(b.upper, 0.78699, epsilon = 5e-6);
    }

    #[test]
    fn weight_bounds_negative_alpha_swaps_roles() {
        // For α < 0, the smallest instance attains the largest weight; the
        // interval endpoints are the mirrored closed forms.
        let e = std::f64::consts::E;
        let b = weight_bounds(-1.0, 2);
        let direct_lower = (-1.0f64).exp() / ((-1.0f64).exp() + 1.0);
        assert_relative_eq!(b.lower, direct_lower, max_relative = 1e-12);
        assert_relative_eq!(b.upper, 1.0 / (1.0 + (-1.0f64).exp()), max_relative = 1e-12);
        assert!(b.lower < 1.0 / 2.0 && 1.0 / 2.0 < b.upper);
        assert_relative_eq!(b.upper, e / (e + 1.0), max_relative = 1e-12);
    }

    #[test]
    fn weight_bounds_stay_finite_at_extremes() {
        for alpha in [500.0, -500.0] {
            let b = weight_bounds(alpha, 27);
            assert!(b.lower > 0.0 && b.lower.is_finite());
            assert!(b.upper < 1.0 + 1e-15 && b.upper.is_finite());
            assert!(b.lower <= 1.0 / 27.0 && 1.0 / 27.0 <= b.upper);
        }
    }

    #[test]
    fn cap_bound_examples() {
        let bound = cap_alpha_bound(0.5, 27).unwrap();
        assert_eq!(bound, (26.0f64).ln());
        assert_abs_diff_eq!(bound, 3.25810, epsilon = 5e-6);

        for m in 2..10 {
            let forced_mean = cap_alpha_bound(1.0 / m as f64, m).unwrap();
            assert_abs_diff_eq!(forced_mean, 0.0, epsilon = 1e-12);
        }

        assert_eq!(cap_alpha_bound(0.5, 2).unwrap(), 0.0);
        assert!(cap_alpha_bound(0.2, 3).is_err()); // below 1/m = 1/3
        assert!(cap_alpha_bound(1.0, 3).is_err());
        assert!(cap_alpha_bound(0.5, 1).is_err());
    }

    #[test]
    fn alpha_lower_bound_is_dual() {
        // φ− = 1/m forces α ≥ 0; smaller φ− admits negative α.
        for m in 2..8 {
            let at_mean = alpha_lower_bound(1.0 / m as f64, m).unwrap();
            assert_abs_diff_eq!(at_mean, 0.0, epsilon = 1e-12);
        }
        let b = alpha_lower_bound(0.1, 5).unwrap();
        assert!(b < 0.0);
        assert!(alpha_lower_bound(0.5, 5).is_err()); // above 1/m
        assert!(alpha_lower_bound(0.0, 5).is_err());
    }

    #[test]
    fn projection_clamps_and_is_idempotent() {
        let upper = (26.0f64).ln();
        let a = AlphaVector::capped(array![4.0, 1.0], upper).unwrap();
        let projected = project_alpha(a);
        assert_eq!(projected.alpha[0], upper);
        assert_eq!(projected.alpha[1], 1.0);
        let again = project_alpha(projected.clone());
        assert_eq!(again, projected);

        let interior = AlphaVector::capped(array![0.0, 0.0], 1.0).unwrap();
        let projected = project_alpha(interior.clone());
        assert_eq!(projected, interior);

        let unconstrained = AlphaVector::unconstrained(array![9.0]);
        assert_eq!(project_alpha(unconstrained.clone()), unconstrained);
    }

    #[test]
    fn rap_penalty_examples() {
        let a = AlphaVector::regularized(array![2.0, -1.0], 1e-3).unwrap();
        let (value, grad) = rap_penalty(&a);
        assert_abs_diff_eq!(value, 0.005, epsilon = 1e-15);
        assert_abs_diff_eq!(grad[0], 0.004, epsilon = 1e-15);
        assert_abs_diff_eq!(grad[1], -0.002, epsilon = 1e-15);

        let zero_lambda = AlphaVector::regularized(array![2.0, -1.0], 0.0).unwrap();
        let (value, grad) = rap_penalty(&zero_lambda);
        assert_eq!(value, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));

        let zero_alpha = AlphaVector::regularized(array![0.0, 0.0], 1e-3).unwrap();
        let (value, grad) = rap_penalty(&zero_alpha);
        assert_eq!(value, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn operator_forward_dispatch() {
        let p = likelihoods(array![[0.2, 0.9], [0.8, 0.1]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);

        let (mean_pooled, _) = PoolingOperator::mean(2).forward(&p, &mut rng).unwrap();
        assert_abs_diff_eq!(mean_pooled.values[0], 0.5, epsilon = 1e-15);

        let (softmax_pooled, _) = PoolingOperator::softmax(2).forward(&p, &mut rng).unwrap();
        let (direct, _) = pool_softmax(&p);
        assert_eq!(softmax_pooled.values, direct.values);

        let (max_pooled, _) = PoolingOperator::max(2).forward(&p, &mut rng).unwrap();
        assert_eq!(max_pooled.values[0], 0.8);
        assert_eq!(max_pooled.values[1], 0.9);
    }

    #[test]
    fn operator_cap_projects_initial_alpha() {
        // m = 2: bound is ln(1) = 0, so the usual init of 1 is clamped to 0.
        let op = PoolingOperator::cap(3, 1.0, 2).unwrap();
        assert!(op.alpha.alpha.iter().all(|a| *a == 0.0));
        // m = 27: bound ln 26 leaves the init untouched.
        let op = PoolingOperator::cap(3, 1.0, 27).unwrap();
        assert!(op.alpha.alpha.iter().all(|a| *a == 1.0));
        assert!(PoolingOperator::cap(3, 1.0, 1).is_err());
    }

    #[test]
    fn operator_backward_max_routes_through_selected_instance() {
        let p = likelihoods(array![[0.1], [0.9], [0.4]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let op = PoolingOperator::max(1);
        let (_, weights) = op.forward(&p, &mut rng).unwrap();
        let grads = op.backward(&p, array![2.0].view(), &weights).unwrap();
        assert_eq!(grads.d_instances[[1, 0]], 2.0);
        assert_eq!(grads.d_instances[[0, 0]], 0.0);
        assert_eq!(grads.d_instances[[2, 0]], 0.0);
        assert_eq!(grads.d_alpha[0], 0.0);
    }
}
